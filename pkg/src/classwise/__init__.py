"""Class-wise adversarial robustness lab.

Train small classifiers (standard / min-max / KL-regularized objectives),
attack them (FGSM, PGD, temperature-PGD, transfer), and compute per-class
robustness diagnostics: confusion matrices, class-wise variance, maximum
class-wise discrepancy, confidence smoothness, class-removal retraining and
background-manipulation studies.
"""

__version__ = "0.1.0"
