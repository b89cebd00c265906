import sys

from pixsub.cli import main

sys.exit(main())
