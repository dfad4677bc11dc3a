"""Smoke test for the Python bindings.

Build the extension first:

    cargo build --release -p ngebm-py --features extension-module

The script imports an installed ``ngebm`` module if there is one, and
otherwise loads the freshly built library from ``target/``.
"""

import importlib.machinery
import importlib.util
import math
import pathlib
import sys

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load():
    try:
        import ngebm

        return ngebm
    except ImportError:
        pass
    for profile in ("release", "debug"):
        for name in ("libngebm_py.so", "libngebm_py.dylib", "ngebm_py.dll"):
            path = ROOT / "target" / profile / name
            if path.exists():
                loader = importlib.machinery.ExtensionFileLoader("ngebm", str(path))
                spec = importlib.util.spec_from_loader("ngebm", loader)
                module = importlib.util.module_from_spec(spec)
                loader.exec_module(module)
                sys.modules["ngebm"] = module
                return module
    sys.exit("ngebm extension not found; build it with cargo first")


def main():
    ng = load()
    centers = [[-0.5, 0.0], [0.5, 0.0]]
    x, y = ng.gaussian_mixture(centers, 0.15, 64, seed=1)
    assert len(x) == 128 and set(y) == {0, 1}

    config = '{"epochs": 10, "batch_size": 32, "seed": 1, "adam": {"lr": 0.003}}'
    model, log = ng.train(x, y, 2, hidden=[16], config=config)
    assert len(log) == 10
    assert log[-1]["eval_accuracy"] > 0.9, log[-1]
    print(model, "final accuracy", log[-1]["eval_accuracy"])

    ev = ng.evaluate(model, x, y)
    assert 0.0 <= ev["ece"] <= 1.0

    e = model.energy(x)
    logits = model.logits(x)
    for ei, row in zip(e, logits):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        assert abs(ei + lse) < 1e-9
    assert all(g >= 0.0 for g in model.egm(x))

    ood, _ = ng.gaussian_mixture([[0.0, 0.8]], 0.15, 64, seed=2)
    for kind in ("log_density_proxy", "max_softmax", "approximate_mass"):
        a = ng.auroc(model.score(x, kind), model.score(ood, kind))
        print(f"AUROC[{kind}] = {a:.4f}")
        assert 0.0 <= a <= 1.0
    assert ng.auroc([1.0, 2.0], [1.0, 2.0]) == 0.5

    report = ng.ece([0.9, 0.8, 0.3], [True, False, True], n_bins=10)
    assert len(report["bins"]) == 10
    h = ng.histogram([0.0, 1.0, 1.0, 2.0], n_bins=4)
    assert sum(h["counts"]) == 4

    adv = ng.pgd(model, x, y, "linf", 0.1, n_steps=10)
    assert all(max(abs(a - b) for a, b in zip(r, s)) <= 0.1 for r, s in zip(adv, x))

    try:
        model.score(x, "nonsense")
    except ValueError:
        pass
    else:
        raise AssertionError("bad score kind accepted")
    print("python smoke test passed")


if __name__ == "__main__":
    main()
