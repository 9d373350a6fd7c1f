"""Teacher-student anomaly detection with a dilated SE backbone, adversarial distillation
and refined multi-scale anomaly maps, on a small numpy autograd kernel."""

__version__ = "0.1.0"
