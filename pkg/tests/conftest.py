import pytest

from cfasim.mcu import MemoryLayout


@pytest.fixture
def layout():
    return MemoryLayout()


@pytest.fixture
def small_layout():
    # 8 KB PMEM keeps attestation costs low in bulk tests
    return MemoryLayout(pmem_size=0x2000, cflog_size=128)
