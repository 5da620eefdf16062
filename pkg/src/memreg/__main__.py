import sys

from memreg.cli import main

sys.exit(main())
