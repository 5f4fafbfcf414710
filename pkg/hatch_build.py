import os
import subprocess

from hatchling.builders.hooks.plugin.interface import BuildHookInterface


def get_git_rev():
    try:
        here = os.path.abspath(os.path.dirname(__file__))
        rev_raw = subprocess.check_output(
            ["git", "rev-parse", "HEAD"], cwd=here, stderr=subprocess.DEVNULL,
        )
        return rev_raw.decode("utf8").strip()
    except (OSError, subprocess.CalledProcessError):
        return "unknown"


def write_baked_revision(dest_dir):
    os.makedirs(dest_dir, exist_ok=True)
    with open(os.path.join(dest_dir, "_baked_revision.py"), "w") as f:
        f.write(f'revision = "{get_git_rev()}"\n')


class CustomBuildHook(BuildHookInterface):
    """Bake the git revision into wheels and sdists built from a checkout."""

    PLUGIN_NAME = "custom"

    def initialize(self, version, build_data):
        here = os.path.abspath(os.path.dirname(__file__))
        if not os.path.exists(os.path.join(here, ".git")):
            return
        if self.target_name not in ("wheel", "sdist"):
            return
        write_baked_revision(os.path.join(here, "src", "mcts_decode"))
