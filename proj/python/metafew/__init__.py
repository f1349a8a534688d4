"""Few-shot meta-learning engine: MAML and hypernetwork-based adaptation.

The compiled extension carries the full API; this package re-exports it.
"""

try:
    from ._metafew import (  # noqa: F401
        ConfigurationError,
        IoError,
        NumericError,
        Session,
        ShapeError,
        adam_step,
        gaussian2d_episode,
        glyph_image,
        lr_schedule,
        presets,
        softmax_xent,
        softmax_xent_grad,
        switch_lambda,
    )
except ImportError:  # in-tree builds put the extension on PYTHONPATH directly
    from _metafew import (  # noqa: F401
        ConfigurationError,
        IoError,
        NumericError,
        Session,
        ShapeError,
        adam_step,
        gaussian2d_episode,
        glyph_image,
        lr_schedule,
        presets,
        softmax_xent,
        softmax_xent_grad,
        switch_lambda,
    )

__version__ = "0.1.0"
