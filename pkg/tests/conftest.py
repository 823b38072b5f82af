import numpy as np
import pytest

from fecembed import dataset as ds, synth


@pytest.fixture(scope="session")
def small_world():
    """A small planted-oracle dataset shared by tests that only need some triplets."""
    oracle = synth.make_oracle(11, in_dim=12, emb_dim=4)
    faces = synth.generate_faces(oracle, 120, 6, seed=1)
    data = synth.generate_triplet_set(oracle, faces, [40, 40, 40], seed=2)
    return oracle, faces, data


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_record(labels, votes, uris=("a", "b", "c")):
    faces = tuple(
        ds.FaceRecord(ds.face_id(u, (0.0, 1.0, 0.0, 1.0)), u, (0.0, 1.0, 0.0, 1.0),
                      frozenset(ds.EmotionLabel(l) for l in ls))
        for u, ls in zip(uris, labels)
    )
    return ds.TripletRecord(faces, tuple(ds.RaterVote(f"r{i}", v) for i, v in enumerate(votes)))


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number, name, ok, detail):
    status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
    line = f"[{status}] criterion {number:>2} {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
