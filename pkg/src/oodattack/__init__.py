"""Feature-space ID->OOD and OOD->ID attacks on frozen encoder pipelines."""

__version__ = "0.1.0"
