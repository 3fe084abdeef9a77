import sys

from ddslab.cli import main

sys.exit(main())
