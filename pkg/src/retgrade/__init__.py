"""Diabetic-retinopathy grading toolkit.

Degrades fundus images to emulate capture defects, trains and serves a
small attention-augmented CNN grading images into 5 severity levels,
explains predictions with integrated-gradients overlays, and captures
clinician feedback over HTTP.
"""

__version__ = "0.1.0"

GRADE_NAMES = {
    0: "No DR",
    1: "Mild DR",
    2: "Moderate DR",
    3: "Severe DR",
    4: "Proliferative DR",
}
