"""avatarforge: reposable 3D avatars from an articulated semantic-SDF body,
a small conditioned radiance field, and diffusion-style guidance."""

__version__ = "0.1.0"
