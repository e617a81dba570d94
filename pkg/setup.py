#!/usr/bin/env python3
"""
Diffusion Inversion Lab Setup Script

Installs the pinned numerical stack, creates the run output root and runs
one short inversion to confirm the package imports and computes.
"""

import sys
import subprocess
from pathlib import Path

SUPPORTED = ((3, 9), (3, 12))


def require_interpreter():
    """Stop on interpreters the pinned numpy/scipy wheels do not cover"""
    low, high = SUPPORTED
    found = ".".join(str(part) for part in sys.version_info[:3])
    if sys.version_info < low:
        sys.exit(f"setup: need Python {low[0]}.{low[1]}+, found {found}")
    if sys.version_info >= high:
        print(f"setup: Python {found} is untested; numpy 1.24 and scipy 1.10 ship wheels up to 3.11")


def _step(title, argv):
    """Run argv, echo its output and report whether it exited cleanly"""
    print(f"\n--- {title}")
    completed = subprocess.run(argv, capture_output=True, text=True)
    if completed.stdout.strip():
        print(completed.stdout.rstrip())
    if completed.returncode != 0:
        print(f"--- {title} failed (exit {completed.returncode})")
        if completed.stderr.strip():
            print(completed.stderr.rstrip())
        return False
    return True


def install_requirements():
    """Install pinned requirements"""
    return _step("pip install -r requirements.txt",
                 [sys.executable, "-m", "pip", "install", "-r", "requirements.txt"])


def create_directories():
    """Create the default output root"""
    sys.path.insert(0, str(Path(__file__).resolve().parent))
    try:
        from config import Config
        root = Config.OUTPUT_ROOT
    except ImportError:
        root = "runs"
    Path(root).mkdir(parents=True, exist_ok=True)
    print(f"output root: {root}")


def smoke_inversion():
    """Import every service module and run one tiny inversion"""
    check = (
        "from app.services.schedule import build_linear_schedule; "
        "from app.services.gaussian_mixture import default_mixture; "
        "from app.services.inversion import SPDInvConfig, invert; "
        "import app.services.experiment, app.cli; "
        "s = build_linear_schedule(1000, 1e-4, 2e-2, 10); "
        "t = invert([1.0, 1.0], 0, default_mixture(s), s, SPDInvConfig(max_rounds=3)); "
        "print('inversion ok, final residual', t.final_residuals[-1])"
    )
    return _step("smoke inversion", [sys.executable, "-c", check])


def main():
    print("Diffusion Inversion Lab setup")
    require_interpreter()

    _step("pip upgrade", [sys.executable, "-m", "pip", "install", "--upgrade", "pip"])
    if not install_requirements():
        sys.exit("setup: dependency install failed, see the pip output above")

    create_directories()

    if not smoke_inversion():
        print("\nsetup finished, but the smoke inversion failed")
        return
    print("\nsetup finished")
    print("  default comparison: python main.py roundtrip --config configs/default.json")
    print("  tests:              pytest   (add -m 'not slow' to skip the long runs)")


if __name__ == "__main__":
    main()
