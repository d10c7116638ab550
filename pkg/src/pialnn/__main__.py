import sys

from pialnn.cli import main

sys.exit(main())
