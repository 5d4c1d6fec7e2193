from .assignment import AssignmentResult, clustering_acc, hungarian
from .kmeans import kmeans, kmeans_baseline
from .metrics import IncrementalReport, incremental_report, unlabelled_acc

__all__ = [
    "AssignmentResult",
    "IncrementalReport",
    "clustering_acc",
    "hungarian",
    "incremental_report",
    "kmeans",
    "kmeans_baseline",
    "unlabelled_acc",
]
