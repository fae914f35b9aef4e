import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Six 16x16 views of the default scene (fast to generate)."""
    from udnf.scenegen import default_scene, generate_dataset, load_dataset

    root = tmp_path_factory.mktemp("data") / "spheres"
    generate_dataset(default_scene(), 6, "semisphere", 3, root, image_size=16, gt_samples=64, test_fraction=0.5)
    return root


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(RESULTS):
        name, ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n} [{name}]: {'PASS' if ok else 'FAIL'}  {detail}")
