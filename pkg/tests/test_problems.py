import json

import numpy as np
import pytest

from snsot import validate
from snsot.problems import (
    ImageGrid,
    ParseError,
    gaussian_blobs,
    gen_random_assignment,
    grid_cost,
    image_pair_problem,
    image_to_marginal,
    load_image,
    load_problem,
    rank_one_cost_problem,
    save_problem,
)
from snsot.problems import _read_pgm


def test_random_assignment_shape_and_determinism():
    p = gen_random_assignment(1, seed=0)
    assert p.cost.shape == (1, 1) and 0 <= p.cost[0, 0] < 1
    assert np.array_equal(p.r, [1.0]) and np.array_equal(p.c, [1.0])
    a, b = gen_random_assignment(20, 3, 5.0), gen_random_assignment(20, 3, 5.0)
    assert np.array_equal(a.cost, b.cost) and a.eta == b.eta == 5.0
    assert not np.array_equal(a.cost, gen_random_assignment(20, 4).cost)
    validate(a)


def test_grid_cost_examples():
    C = grid_cost(28, 28, "l2_squared")
    assert C[0, 28 * 28 - 1] == pytest.approx(2 * (27 / 28) ** 2, rel=1e-15)
    assert C[0, 28 * 28 - 1] == pytest.approx(1.859694, abs=1e-6)
    assert np.all(np.diag(C) == 0)
    L1 = grid_cost(28, 28, "l1")
    assert L1[0, 1] == pytest.approx(1 / 28, rel=1e-15)
    assert L1[0, 28] == pytest.approx(1 / 28, rel=1e-15)
    assert np.array_equal(grid_cost(3, 2, "l2sq"), grid_cost(3, 2, "l2_squared"))
    with pytest.raises(ValueError):
        grid_cost(2, 2, "cosine")


def test_grid_cost_rectangular_scale():
    # 3 wide, 2 high: s = 3, pixel (1, 2) is the last one
    C = grid_cost(3, 2, "l1")
    assert C.shape == (6, 6)
    assert C[0, 5] == pytest.approx((1 + 2) / 3)


def test_image_to_marginal():
    flat = ImageGrid(np.full((3, 4), 7.0))
    assert np.allclose(image_to_marginal(flat, 0.1), 1 / 12, rtol=1e-15)
    img = np.zeros((4, 4))
    img[1, 2] = 9.0
    m = image_to_marginal(ImageGrid(img), 1e-6)
    # (1 + eps/N) / (1 + eps): within eps/N of 1/(1 + eps)
    assert m.max() == pytest.approx(1 / (1 + 1e-6), rel=1e-7)
    assert np.all(m > 0) and m.sum() == pytest.approx(1.0, abs=1e-15)
    assert np.argmax(m) == 1 * 4 + 2
    with pytest.raises(ValueError):
        image_to_marginal(flat, -1.0)


def test_image_grid_validation():
    with pytest.raises(ValueError):
        ImageGrid(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        ImageGrid(np.array([[1.0, -1.0]]))


def test_image_pair_problem_dimensions():
    a = gaussian_blobs(5, 4, [(1, 1)], 1.0)
    b = gaussian_blobs(5, 4, [(3, 3)], 1.0)
    p = image_pair_problem(a, b, "l2sq", 10.0)
    assert p.cost.shape == (20, 20)
    validate(p)
    with pytest.raises(ValueError, match="shapes differ"):
        image_pair_problem(a, gaussian_blobs(4, 4, [(1, 1)], 1.0), "l1", 1.0)


def test_rank_one_cost_makes_every_plan_equal():
    p = rank_one_cost_problem(6, seed=0)
    validate(p)
    P1 = np.outer(p.r, p.c)
    # a different feasible plan via a zero-margin perturbation
    E = np.zeros((6, 6))
    E[0, 0] = E[1, 1] = 1e-3
    E[0, 1] = E[1, 0] = -1e-3
    assert np.sum(p.cost * P1) == pytest.approx(np.sum(p.cost * (P1 + E)), rel=1e-14)


def test_pgm_reader(tmp_path):
    f = tmp_path / "a.pgm"
    f.write_text("P2\n# comment\n2 2\n255\n0 255\n255 0\n")
    assert np.array_equal(load_image(f).intensities, [[0, 255], [255, 0]])


@pytest.mark.parametrize("text,where", [
    ("P5\n2 2\n255\n", ":1:"),
    ("P2\n2 x\n255\n", ":2:"),
    ("P2\n2 2\n255\n0 1 2\n", "expected 4 pixels"),
    ("P2\n1 1\n10\n11\n", "outside"),
])
def test_pgm_errors(tmp_path, text, where):
    f = tmp_path / "bad.pgm"
    f.write_text(text)
    with pytest.raises(ParseError, match=where):
        _read_pgm(f)


def test_csv_reader_and_errors(tmp_path):
    f = tmp_path / "g.csv"
    f.write_text("1,2\n3,4\n")
    assert np.array_equal(load_image(f).intensities, [[1, 2], [3, 4]])
    f.write_text("1,2\n3,-4\n")
    with pytest.raises(ParseError, match=r"g\.csv:2:2"):
        load_image(f)
    f.write_text("1,2\n3\n")
    with pytest.raises(ParseError, match="columns"):
        load_image(f)


def test_problem_round_trip(tmp_path):
    p = gen_random_assignment(7, seed=2, eta=12.5)
    header = save_problem(p, tmp_path / "r7.otp.json")
    assert (tmp_path / "r7.otp.bin").stat().st_size == 8 * 49
    q = load_problem(header)
    assert np.array_equal(p.cost, q.cost) and np.array_equal(p.r, q.r)
    assert np.array_equal(p.c, q.c) and p.eta == q.eta
    assert json.loads(header.read_text())["format"] == "f64le-rowmajor-v1"


def test_load_problem_errors(tmp_path):
    header = save_problem(gen_random_assignment(3, 0), tmp_path / "p.otp.json")
    (tmp_path / "p.otp.bin").write_bytes(b"\0" * 10)
    with pytest.raises(ParseError, match="bytes"):
        load_problem(header)
    header.write_text("{not json")
    with pytest.raises(ParseError, match="JSON"):
        load_problem(header)
    header.write_text(json.dumps({"n": 3}))
    with pytest.raises(ParseError, match="missing"):
        load_problem(header)
    with pytest.raises(OSError):
        load_problem(tmp_path / "nope.otp.json")
