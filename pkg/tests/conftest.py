import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from enrichrec.core import IdentityRating, World  # noqa: E402


def make_tiny_world(item_u, item_v, out_u, out_v, lambda_c=0.5, lambda_f=0.75, availability=None):
    """Single-user world with d=1 so that u = x and v = y directly."""
    return World(
        user_a=[[1.0]], user_b=[[1.0]], lambda_c=[lambda_c], lambda_f=[lambda_f],
        item_x=np.array(item_u, dtype=float)[:, None], item_y=np.array(item_v, dtype=float)[:, None],
        outside_x=np.array(out_u, dtype=float)[:, None], outside_y=np.array(out_v, dtype=float)[:, None],
        availability=availability, f_rating=IdentityRating(),
    )


@pytest.fixture
def tiny_world_factory():
    return make_tiny_world


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = []


def record_criterion(cid: str, passed, detail: str) -> None:
    status = passed if isinstance(passed, str) else ("PASS" if passed else "FAIL")
    ACCEPTANCE_LINES.append(f"{cid:>3} {status:7s} {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
