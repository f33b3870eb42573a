"""Shared fixtures: the Flask app in testing mode and small grids."""
import json

import pytest

from qdamp import create_app
from qdamp.modules.field import make_grid


@pytest.fixture(scope='module')
def app():
    """Create the app with the testing configuration."""
    app = create_app('testing')
    with app.app_context():
        yield app


@pytest.fixture(scope='module')
def runner(app):
    return app.test_cli_runner()


@pytest.fixture(scope='module')
def grid64():
    return make_grid(1, 64, 8.0)


@pytest.fixture
def write_config(tmp_path):
    """Write a config tree to tmp_path and return its path."""
    def write(tree, name='run.json'):
        path = tmp_path / name
        path.write_text(json.dumps(tree))
        return path
    return write
