# Tests package for qdamp
