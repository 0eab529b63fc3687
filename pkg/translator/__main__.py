import os
import sys

import django


def main():
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'any2any.settings')
    django.setup()
    from translator.cli import run
    sys.exit(run(sys.argv[1:]))


if __name__ == '__main__':
    main()
