import sys

from fedhenn.cli import main

sys.exit(main())
