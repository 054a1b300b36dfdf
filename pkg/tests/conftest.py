import pytest

from gracybus.crypto import entropy, make_provider
from gracybus.network import NetworkConfig, build_group
from gracybus.pki import CertificateAuthority, enroll


@pytest.fixture
def toy():
    return make_provider(0)


@pytest.fixture
def ca(toy):
    return CertificateAuthority.create(toy, "test-ca", entropy(0, "ca"))


@pytest.fixture
def cred(toy, ca):
    return enroll(toy, ca, "dev", entropy(0, "dev"))


@pytest.fixture
def group8():
    return build_group(8, NetworkConfig(seed=11))


def reference_fnv1a64(data: bytes) -> int:
    # written out from the published FNV constants, independent of the package
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) % 2**64
    return h


# acceptance criteria report one summary line each, collected here and
# printed after the run so they survive output capture

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    """``criterion(n, title)`` returns a recorder; call ``.ok(detail)`` on success.

    Anything else (an assertion, an exception) is reported as FAIL.
    """

    class Recorder:
        def __init__(self, n, title):
            self.n, self.title, self.passed, self.detail = n, title, False, ""
            _ACCEPTANCE[n] = f"criterion {n} {title}: FAIL"

        def ok(self, detail=""):
            self.passed, self.detail = True, detail
            _ACCEPTANCE[self.n] = f"criterion {self.n} {self.title}: PASS" + (f" ({detail})" if detail else "")
            print(_ACCEPTANCE[self.n])

        def fail(self, detail):
            _ACCEPTANCE[self.n] = f"criterion {self.n} {self.title}: FAIL ({detail})"
            print(_ACCEPTANCE[self.n])

    return Recorder


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[n])
