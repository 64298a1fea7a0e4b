"""Mean-teacher semi-supervised 3D object detection sandbox.

Synthetic point-cloud scenes, a small hand-differentiated detector, the
mean-teacher training loop with stochastic input perturbations and three
student/teacher consistency losses, and a detection evaluator with sweep
and ablation harnesses.
"""

__version__ = "0.1.0"
