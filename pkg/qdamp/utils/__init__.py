# Utils package
from qdamp.utils import parsers
from qdamp.utils import state_io
from qdamp.utils import workers

__all__ = ['parsers', 'state_io', 'workers']
