import sys

from omdet.cli import main

sys.exit(main())
