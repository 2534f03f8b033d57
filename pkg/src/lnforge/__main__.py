import sys

from lnforge.cli import main

sys.exit(main())
