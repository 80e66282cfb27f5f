import sys

from fcasim.cli import main

sys.exit(main())
