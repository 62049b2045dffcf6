"""`python -m specmatch <verb>` and the `specmatch` console script."""
import os
import sys


def main():
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'specmatch.settings')
    from django.core.management import execute_from_command_line
    execute_from_command_line(['specmatch'] + sys.argv[1:])


if __name__ == '__main__':
    main()
