import sys

from lifseg.cli import main

sys.exit(main())
