"""tumorscope: a from-scratch CNN engine with a combined explainability stack.

Subpackages cover the full desk-scale pipeline: tensor ops with exact
gradients (``ops``), the binary-classification CNN (``model``), volume to
slice-dataset preprocessing (``nifti``, ``datapipe``), Adam training
(``training``), metrics (``evaluation``), Grad-CAM / LRP / SHAP attribution
(``explain``), deterministic rendering (``render``) and the CLI (``cli``).
"""

__version__ = "0.1.0"
