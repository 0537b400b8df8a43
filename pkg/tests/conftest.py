import multiprocessing.forkserver
import secrets

import pytest

from rocket.timing import tune_interpreter

tune_interpreter()

# Bench cells run in forkserver children. Start the forkserver now, while
# this process is still small: it forks from its own image, so starting it
# late would hand every measured process a copy of a bloated test session.
multiprocessing.forkserver.ensure_running()


@pytest.fixture
def server_name() -> str:
    return f"t{secrets.token_hex(4)}"
