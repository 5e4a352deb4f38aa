import os

# deterministic mode is the default for the whole suite
os.environ.setdefault("ADAPTOR_DETERMINISTIC", "1")
