"""Run shrinknet as Python module."""

import shrinknet.main

if __name__ == "__main__":
    shrinknet.main.main()
