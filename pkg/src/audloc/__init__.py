"""Frame-level localization of audible (collision) actions in silent video.

Subpackages: data (videos, annotations, windows), synth (physics-based
benchmark generator), kinematics (motion and inflectional flow), model
(the network), losses, metrics, training, cli.
"""

__version__ = "0.1.0"
