"""Quick end-to-end check of the Python extension module."""

import math
import random

import qrlong


def main():
    assert qrlong.check_loss(-2.0, 0.25) == 1.5
    assert qrlong.score_psi(0.0, 0.25) == 0.25
    assert abs(qrlong.smoothed_score(0.0, 1.0, 0.25) - (-0.25)) < 1e-15

    rng = random.Random(3)
    ids, y, x = [], [], []
    for i in range(150):
        u = rng.gauss(0.0, 1.0)
        for j in range(4):
            xi = rng.gauss(0.0, 1.0)
            ids.append(f"s{i}")
            x.append([xi])
            y.append(1.0 + 2.0 * xi + 0.7 * u + 0.7 * rng.gauss(0.0, 1.0))
    data = qrlong.Dataset(ids, y, x)
    assert (data.m, data.p, data.n_obs) == (150, 2, 600)

    for method in ("wi", "pqr", "aqr"):
        fit = qrlong.fit(data, 0.5, method)
        assert fit.converged, fit
        assert abs(fit.beta[0] - 1.0) < 0.3 and abs(fit.beta[1] - 2.0) < 0.3, fit
        lo, hi = fit.conf_int(0.95)[1]
        assert lo < fit.beta[1] < hi
        assert all(se > 0 for se in fit.std_errors)
        print(fit)
    assert len(qrlong.fit(data, 0.5, "pqr").rho_hat) == 3

    report = qrlong.simulate(case="t", rho=[0.5], m=60, reps=5, taus=[0.5], methods=["wi", "pqr"], seed=1)
    assert report.columns[0] == "case"
    assert len(report.rows) == 2 * 3
    eff = report.columns.index("eff")
    assert all(math.isclose(r[eff], 1.0) for r in report.rows if r[3] == "WI")
    assert report.to_csv().startswith("# version:")

    try:
        qrlong.fit(data, 1.5)
    except ValueError:
        pass
    else:
        raise AssertionError("tau outside (0, 1) accepted")
    print("smoke test passed")


if __name__ == "__main__":
    main()
