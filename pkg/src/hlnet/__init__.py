"""Scene graph prediction with object, relationship and mediator attention in numpy."""

__version__ = "0.1.0"
