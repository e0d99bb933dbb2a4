import numpy as np
import pytest

from wisernet.conv import conv2d_normal
from wisernet.errors import IndexOutOfRange, NonZeroSum, ParseError, WrongKernelCount
from wisernet.srm import K5_INDEX, default_bank_text, kernel, load_bank, parse_bank


@pytest.fixture(scope="module")
def bank():
    return load_bank()


def test_bundled_bank_has_thirty_kernels(bank):
    assert len(bank) == 30
    assert bank.kernels.shape == (30, 5, 5)


def test_every_kernel_is_high_pass(bank):
    for k in bank.kernels:
        assert np.isfinite(k).all()
        assert k.any()
        assert abs(k.sum()) <= 1e-12


def test_k5_is_square_5x5(bank):
    k5 = kernel(bank, K5_INDEX)
    assert bank.names[K5_INDEX - 1] == "square5x5"
    assert bank.divisors[K5_INDEX - 1] == 12
    expected = np.array([[-1, 2, -2, 2, -1],
                         [2, -6, 8, -6, 2],
                         [-2, 8, -12, 8, -2],
                         [2, -6, 8, -6, 2],
                         [-1, 2, -2, 2, -1]]) / 12.0
    np.testing.assert_array_equal(k5, expected)
    assert abs(k5.sum()) <= 1e-12


def test_square_3x3_embedding(bank):
    k = bank.kernel(bank.index_of("square3x3"))
    assert not k[0].any() and not k[4].any() and not k[:, 0].any() and not k[:, 4].any()
    np.testing.assert_array_equal(k[1:4, 1:4], np.array([[-1, 2, -1], [2, -4, 2], [-1, 2, -1]]) / 4.0)


def test_first_order_horizontal_support(bank):
    k = bank.kernel(bank.index_of("first_e"))
    expected = np.zeros((5, 5))
    expected[2, 2], expected[2, 3] = -1, 1
    np.testing.assert_array_equal(k, expected)


@pytest.mark.parametrize("family,names", [
    ("edge5x5", ["up", "left", "down", "right"]),
    ("edge3x3", ["up", "left", "down", "right"]),
    ("first", ["e", "n", "w", "s"]),
    ("first", ["se", "ne", "nw", "sw"]),
    ("third", ["e", "n", "w", "s"]),
    ("third", ["se", "ne", "nw", "sw"]),
])
def test_directional_families_are_quarter_turns(bank, family, names):
    ks = [bank.kernel(bank.index_of(f"{family}_{n}")) for n in names]
    for a, b in zip(ks, ks[1:]):
        np.testing.assert_array_equal(np.rot90(a), b)


def test_square_kernels_have_full_symmetry(bank):
    for name in ("square5x5", "square3x3"):
        k = bank.kernel(bank.index_of(name))
        for t in (np.fliplr(k), np.flipud(k), k.T):
            np.testing.assert_array_equal(t, k)


def test_constant_image_gives_zero_interior(bank):
    x = np.full((1, 12, 12), 97.0)
    y = conv2d_normal(x, bank.kernels[:, None], padding=2)
    assert np.abs(y[:, 2:-2, 2:-2]).max() <= 1e-12


def test_loading_is_deterministic(bank):
    other = load_bank()
    assert other.kernels.tobytes() == bank.kernels.tobytes()
    assert other.names == bank.names


def test_kernel_returns_independent_copies(bank):
    a = kernel(bank, 7)
    a[:] = 0
    np.testing.assert_array_equal(kernel(bank, 7), bank.kernels[6])
    np.testing.assert_array_equal(kernel(bank, 7), kernel(bank, 7))


def test_index_out_of_range(bank):
    with pytest.raises(IndexOutOfRange):
        kernel(bank, 31)
    with pytest.raises(IndexOutOfRange):
        kernel(bank, 0)


def _lines():
    return [ln for ln in default_bank_text().splitlines() if ln.strip() and not ln.startswith("#")]


def test_29_kernels_rejected():
    with pytest.raises(WrongKernelCount):
        parse_bank("\n".join(_lines()[:29]))


def test_nonzero_sum_rejected():
    lines = _lines()
    lines[0] = "bad; 1 2; 1; 1 1"
    with pytest.raises(NonZeroSum):
        parse_bank("\n".join(lines))


@pytest.mark.parametrize("line", ["x; 2 2; 1; 1 -1 0 0", "x; 3 3; 1; 1 -1", "x; 3 3; one; 0 0 0 0 1 -1 0 0 0",
                                  "x; 3 3; 1", "x; 3 3; 1; 0 0 0 0 0 0 0 0 0"])
def test_malformed_lines_rejected(line):
    lines = _lines()
    lines[0] = line
    with pytest.raises(ParseError):
        parse_bank("\n".join(lines))


def test_load_from_path(tmp_path):
    p = tmp_path / "bank.txt"
    p.write_text(default_bank_text())
    assert load_bank(p).kernels.tobytes() == load_bank().kernels.tobytes()
