from __future__ import annotations

import os
import subprocess


def get_git_rev(path: str | None = None) -> str:
    """Commit hash of the checkout containing `path`, or "unknown".

    Used when no revision was baked in at build time (editable installs);
    `hatch_build.py` carries the same lookup for the build hook.
    """
    if path is None:
        path = os.path.dirname(__file__)
    try:
        rev_raw = subprocess.check_output(
            ["git", "rev-parse", "HEAD"],
            cwd=os.path.abspath(path),
            stderr=subprocess.DEVNULL,
        )
        return rev_raw.decode("utf8").strip()
    except (OSError, subprocess.CalledProcessError):
        return "unknown"
