"""Multi-task mass detection, segmentation and classification with feature transfer.

A numpy implementation: reverse-mode autodiff core, a residual backbone with
a proposal stage, three ROI heads whose segmentation features feed the
classifier, the staged training schedule, inference and evaluation.
"""

__version__ = "0.1.0"
