import sys

from need.cli import main

sys.exit(main())
