import sys

from triplenet.cli import main

sys.exit(main())
