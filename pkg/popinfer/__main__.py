import sys

from popinfer.main import main

sys.exit(main())
