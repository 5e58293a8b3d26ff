import sys

from cabp.cli import main

sys.exit(main())
