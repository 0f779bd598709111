import sys

from deskgrid.cli import main

sys.exit(main())
