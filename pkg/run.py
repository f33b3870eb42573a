#!/usr/bin/env python3
"""Entry point: python run.py <command> --config <path> [--out DIR] [--seed N] [--threads N]."""
import os

from flask.cli import FlaskGroup

from qdamp import create_app

app = create_app(os.environ.get('QDAMP_CONFIG', 'default'))

cli = FlaskGroup(create_app=lambda: app, add_default_commands=False, load_dotenv=False)

if __name__ == '__main__':
    cli()
