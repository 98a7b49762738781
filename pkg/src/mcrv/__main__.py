import sys

from mcrv.cli import main

sys.exit(main())
