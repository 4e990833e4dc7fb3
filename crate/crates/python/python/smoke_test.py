"""Smoke test for the pyspecfuse extension: simulate, fuse, evaluate."""

import json
import os
import sys
import tempfile

import numpy as np

import pyspecfuse as sf


def main():
    ref = sf.synthetic_reference(32, 32, 8, endmembers=3, regions=6, seed=2)
    x = np.array(ref.data()).reshape(ref.shape)
    assert x.shape == (8, 32, 32) and (x > 0).all()

    model = sf.ObservationModel.for_reference(ref, d=2, kernel_size=3, ms_bands=4, seed=1)
    model = sf.ObservationModel.from_json(model.to_json())
    y_h, y_m, noise_norm = sf.simulate(ref, model)
    assert y_h.shape == (8, 16, 16) and y_m.shape == (4, 32, 32)

    basis = sf.learn_pca(y_h, 3)
    assert basis.dim == 3 and 0.9 < basis.energy_fraction <= 1.0
    u = basis.project(ref)
    assert u.shape == (3, 32, 32)

    same = sf.evaluate(ref, ref, 0.25)
    assert same["rmse_paper"] == 0.0 and same["uiqi"] == 1.0

    x_hat, x_rough, trace, _ = sf.fuse(
        y_h, y_m, model, hs_noise_norm=noise_norm, dim=3, patch_side=4, n_atoms=32, epochs=3, max_outer=10
    )
    assert all(b <= a * (1 + 1e-9) for a, b in zip(trace, trace[1:]))
    fused = sf.evaluate(ref, x_hat, 0.25)
    rough = sf.evaluate(ref, x_rough, 0.25)
    print(f"fused rmse {fused['rmse_sqrt']:.4e}, rough estimate {rough['rmse_sqrt']:.4e}")

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "x_hat.sfc")
        x_hat.write(path)
        back = sf.Cube.read(path)
        assert back.data() == x_hat.data()

        cfg = {"workflow": "simulate", "scenario": {"d": 2, "kernel_size": 3, "synthetic": {"width": 8, "height": 8, "bands": 8}}}
        cfg_path = os.path.join(tmp, "sim.json")
        with open(cfg_path, "w") as f:
            json.dump(cfg, f)
        sf.run_config(cfg_path, out=os.path.join(tmp, "sim"))
        assert os.path.exists(os.path.join(tmp, "sim", "manifest.json"))

        try:
            sf.Cube(2, 2, 2, [0.0] * 7)
        except ValueError:
            pass
        else:
            raise AssertionError("bad cube shape accepted")

    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
