"""Point-cloud conditioned diffusion-transformer policy with a
scene-prediction auxiliary head, plus the planar pushing simulator it is
trained and evaluated on."""

__version__ = "0.1.0"

__all__ = ["IssDiffusionPolicy"]


def __getattr__(name):
    if name == "IssDiffusionPolicy":
        from .policy import IssDiffusionPolicy

        return IssDiffusionPolicy
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
