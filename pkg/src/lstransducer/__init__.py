"""Label-synchronous neural transducer for simultaneous translation, at toy scale."""

__version__ = "0.1.0"
