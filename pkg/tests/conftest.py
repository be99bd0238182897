import pytest

from latfuse.parallel import THREADS_ENV, set_num_threads
from tests.utils import Latfuse

PAIR_SHAPE = "1x4x128x128"
PAIR_SEED = 42


@pytest.fixture(autouse=True)
def single_thread(monkeypatch: pytest.MonkeyPatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)
    set_num_threads(None)
    yield
    set_num_threads(None)


@pytest.fixture(scope="session")
def latfuse():
    return Latfuse()


@pytest.fixture(scope="session")
def pair_files(tmp_path_factory: pytest.TempPathFactory, latfuse: Latfuse):
    """structured-pair latents at seed 42, written once per session"""
    tmp_path = tmp_path_factory.mktemp("latents")
    latfuse.ok(
        "gen-latent",
        "--kind",
        "structured-pair",
        "--shape",
        PAIR_SHAPE,
        "--seed",
        str(PAIR_SEED),
        "--out",
        tmp_path / "pair.npy",
    )
    return tmp_path / "pair_base.npy", tmp_path / "pair_refined.npy"


@pytest.fixture(scope="session")
def small_pair_files(tmp_path_factory: pytest.TempPathFactory, latfuse: Latfuse):
    tmp_path = tmp_path_factory.mktemp("small-latents")
    latfuse.ok(
        "gen-latent", "--kind", "structured-pair", "--shape", "1x4x16x16", "--seed", "3", "--out", tmp_path / "pair.npy"
    )
    return tmp_path / "pair_base.npy", tmp_path / "pair_refined.npy"
