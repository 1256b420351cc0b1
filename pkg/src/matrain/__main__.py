import sys

from matrain.cli import main

sys.exit(main())
