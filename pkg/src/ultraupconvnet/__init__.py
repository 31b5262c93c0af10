"""numpy reimplementation of a ConvNeXt encoder + UPerNet decoder multi-task network."""

__version__ = "0.1.0"
