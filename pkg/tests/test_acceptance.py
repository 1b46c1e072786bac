"""Acceptance criteria, one test per criterion.

Each test prints one `PASS criterion-N ...` / `FAIL criterion-N ...` line
(run pytest with -s or rely on the captured stdout of failing tests).  The
end-to-end experiment criteria regenerate training data at desk scale
in-session, so the module takes tens of minutes in total; every criterion
also checks its stated wall-clock budget.
"""

import json
import time

import numpy as np
import pytest

from eitopt.cli import main as cli_main
from eitopt.config import preset_config
from eitopt.dataset import TrainingSet, build_training_set, one_step_gauss_newton
from eitopt.fem import (
    ContactImpedances,
    StimulationProtocol,
    adjacent_protocol,
    assemble_system,
    forward_with_jacobian,
    hessian,
    solve_forward,
)
from eitopt.geometry import square_domain, uniform_layout, validate_layout
from eitopt.mesh import TriangularMesh, generate_mesh
from eitopt.metrics import (
    distinguishability,
    mean_condition_numbers,
    mean_modeling_error,
    metric_fields,
)
from eitopt.network import (
    NetworkArchitecture,
    TrainConfig,
    _init_params,
    _pack,
    huang_layer_sizes,
    loss_and_gradient,
    optimize_layout,
    train,
)
from eitopt.recon import reconstruction_study
from eitopt.sampler import build_covariance


def report(criterion: str, ok: bool, detail: str) -> bool:
    print(f"{'PASS' if ok else 'FAIL'} {criterion}: {detail}")
    return ok


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0


# ----------------------------------------------------------------------
# shared desk-scale experiments
# ----------------------------------------------------------------------


def run_experiment(preset: str, master_seed: int | None = None, threads: int = 2):
    """Desk-scale pipeline for one geometry: data, training, prediction,
    apples-to-apples metrics against the uniform baseline."""
    cfg = preset_config(preset)
    if master_seed is not None:
        cfg = cfg.with_master_seed(master_seed)
    dom = cfg.domain
    k = cfg.k
    z = ContactImpedances.uniform(k, cfg.z_value)
    proto = adjacent_protocol(k, cfg.amplitude)

    ts = build_training_set(
        dom, cfg.per_side, cfg.width,
        cfg.raw["dataset"]["n_layouts"], cfg.raw["dataset"]["n_sigma"],
        cfg.h_max, cfg.h_min, cfg.prior_params, cfg.z_value,
        seed=cfg.seed("dataset"), min_gap=cfg.min_gap, threads=threads,
    )
    l1, l2 = huang_layer_sizes(k, cfg.raw["dataset"]["n_layouts"])
    net = train(
        ts,
        NetworkArchitecture(hidden1=l1, hidden2=l2, output_dim=2 * k),
        TrainConfig(seed=cfg.seed("train")),
    )
    opt = optimize_layout(net, dom, cfg.per_side, cfg.width, cfg.min_gap)
    validate_layout(dom, opt, cfg.min_gap)
    uni = uniform_layout(dom, cfg.per_side, cfg.width)

    m = cfg.raw["metrics"]
    ref, fields = metric_fields(
        dom, m["ref_spacing"], m["kappa_samples"], cfg.prior_params, cfg.seed("metrics")
    )
    mesh_seed = cfg.seed("mesh")
    mu_o = mean_modeling_error(
        dom, opt, fields[: m["mu_samples"]], ref, cfg.h_max, cfg.h_max / 2, z, proto, mesh_seed
    )
    mu_u = mean_modeling_error(
        dom, uni, fields[: m["mu_samples"]], ref, cfg.h_max, cfg.h_max / 2, z, proto, mesh_seed
    )
    kh_o, kr_o, _ = mean_condition_numbers(
        dom, opt, fields, ref, cfg.h_max, cfg.h_min, z, proto, mesh_seed
    )
    kh_u, kr_u, _ = mean_condition_numbers(
        dom, uni, fields, ref, cfg.h_max, cfg.h_min, z, proto, mesh_seed
    )
    return {
        "cfg": cfg, "dom": dom, "z": z, "proto": proto,
        "net": net, "optimized": opt, "uniform": uni,
        "mu_ratio": float(np.abs(mu_u).sum() / np.abs(mu_o).sum()),
        "kappa_H": (kh_o, kh_u), "kappa_R": (kr_o, kr_u),
        "kH_reduction": (kh_u - kh_o) / kh_u,
        "kR_reduction": (kr_u - kr_o) / kr_u,
    }


@pytest.fixture(scope="session")
def square_experiment():
    with Timer() as t:
        result = run_experiment("square-1x1")
    result["seconds"] = t.seconds
    return result


@pytest.fixture(scope="session")
def rect_experiments():
    out = []
    with Timer() as t:
        for family in (1, 2, 3):
            out.append(run_experiment("rect-2x1", master_seed=family))
    return out, t.seconds


@pytest.fixture(scope="session")
def triangle_experiment():
    with Timer() as t:
        result = run_experiment("right-triangle")
    result["seconds"] = t.seconds
    return result


# ----------------------------------------------------------------------
# criteria
# ----------------------------------------------------------------------


class TestCriterion1FEMCorrectness:
    def test_fem_correctness(self):
        with Timer() as t:
            dom = square_domain()
            lay = uniform_layout(dom, [3, 3, 3, 3], 0.075)
            mesh = generate_mesh(dom, lay, 0.125, 0.0625, seed=1)
            assert mesh.n_nodes <= 300
            k = 12
            z = ContactImpedances.uniform(k, 1e-5)
            rng = np.random.default_rng(0)
            sigma = 1.0 + 0.6 * rng.random(mesh.n_nodes)

            # exhaustive reciprocity: drive every unordered pair at once
            pairs = [(a, b) for a in range(k) for b in range(a + 1, k)]
            inj = np.zeros((k, len(pairs)))
            for j, (a, b) in enumerate(pairs):
                inj[a, j], inj[b, j] = 1.0, -1.0
            proto_all = StimulationProtocol(injections=inj, k=k)
            pot = solve_forward(mesh, sigma, z, proto_all).electrode_potentials
            sel = np.array(pairs)
            R = pot[sel[:, 0], :] - pot[sel[:, 1], :]  # R[q, p] = drive p, measure q
            recip = np.abs(R - R.T).max() / np.abs(R).max()

            # joint scaling law
            proto = adjacent_protocol(k)
            c = 2.0
            v1 = solve_forward(mesh, sigma, z, proto).voltages
            v2 = solve_forward(
                mesh, c * sigma, ContactImpedances.uniform(k, 1e-5 / c), proto
            ).voltages
            scaling = np.abs(v2 - v1 / c).max() / np.abs(v1 / c).max()

            # 2-triangle dense assembly oracle
            nodes = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
            tris = np.array([[0, 1, 2], [0, 2, 3]])
            toy = TriangularMesh(
                nodes=nodes, triangles=tris,
                electrode_edges=(np.array([[0, 1]]),), h_max=2.0, h_min=1.0,
            )
            sig_toy = np.array([1.0, 2.0, 3.0, 4.0])
            zval = 0.3
            sys_ = assemble_system(toy, sig_toy, ContactImpedances.uniform(1, zval))

            B = np.zeros((4, 4))
            for tri in tris:
                p = nodes[tri]
                d1, d2 = p[1] - p[0], p[2] - p[0]
                area = 0.5 * abs(d1[0] * d2[1] - d1[1] * d2[0])
                bb = np.array([p[1, 1] - p[2, 1], p[2, 1] - p[0, 1], p[0, 1] - p[1, 1]])
                cc = np.array([p[2, 0] - p[1, 0], p[0, 0] - p[2, 0], p[1, 0] - p[0, 0]])
                B[np.ix_(tri, tri)] += sig_toy[tri].mean() * (np.outer(bb, bb) + np.outer(cc, cc)) / (4 * area)
            B[np.ix_([0, 1], [0, 1])] += 1.0 / (6 * zval) * np.array([[2.0, 1.0], [1.0, 2.0]])
            C = np.zeros((4, 1))
            C[[0, 1], 0] = -1.0 / (2 * zval)
            D = np.array([[1.0 / zval]])
            oracle = np.abs(
                sys_.full_matrix.toarray() - np.block([[B, C], [C.T, D]])
            ).max()

        ok = report(
            "criterion-1",
            recip <= 1e-8 and scaling <= 1e-10 and oracle <= 1e-14 and t.seconds < 10,
            f"reciprocity {recip:.2e} (<=1e-8), scaling {scaling:.2e} (<=1e-10), "
            f"assembly oracle {oracle:.2e} (<=1e-14), {t.seconds:.1f}s (<10s)",
        )
        assert ok


class TestCriterion2Sensitivities:
    def test_sensitivities(self):
        with Timer() as t:
            dom = square_domain()
            lay = uniform_layout(dom, [3, 3, 3, 3], 0.075)
            mesh = generate_mesh(dom, lay, 0.25, 0.0375, seed=1)
            k = 12
            z = ContactImpedances.uniform(k, 1e-5)
            proto = adjacent_protocol(k)
            rng = np.random.default_rng(11)
            sigma = 1.0 + 0.5 * rng.random(mesh.n_nodes)
            _, J = forward_with_jacobian(mesh, sigma, z, proto)
            rows = rng.integers(0, J.shape[0], 50)
            cols = rng.integers(0, J.shape[1], 50)
            fds = np.empty(50)
            for i, (r, n) in enumerate(zip(rows, cols)):
                h = 1e-6 * sigma[n]
                sp = sigma.copy(); sp[n] += h
                sm = sigma.copy(); sm[n] -= h
                fds[i] = (
                    solve_forward(mesh, sp, z, proto).voltages[r]
                    - solve_forward(mesh, sm, z, proto).voltages[r]
                ) / (2 * h)
            jac_err = float(np.abs(J[rows, cols] - fds).max() / np.abs(fds).max())

            small = generate_mesh(dom, lay, 0.34, 0.0375, seed=1)
            assert small.n_nodes <= 100
            prior = build_covariance(small, 0.2, 0.28, 0.002)
            sig2 = 1.0 + rng.random(small.n_nodes)
            sigma_hat, beta = one_step_gauss_newton(small, sig2, prior, z, proto)
            v_t = solve_forward(small, sig2, z, proto).voltages
            sigma0 = np.full(small.n_nodes, sig2.mean())
            sol0, J0 = forward_with_jacobian(small, sigma0, z, proto)
            delta = np.linalg.solve(
                hessian(J0) + np.linalg.inv(prior.Gamma), J0.T @ (v_t - sol0.voltages)
            )
            gn_err = float(np.abs(sigma_hat - (sigma0 + delta)).max() / np.abs(delta).max())

        ok = report(
            "criterion-2",
            jac_err <= 1e-4 and gn_err <= 1e-10 and t.seconds < 60,
            f"jacobian-vs-FD {jac_err:.2e} (<=1e-4), one-step-GN oracle {gn_err:.2e} "
            f"(<=1e-10, {small.n_nodes} nodes), {t.seconds:.1f}s (<60s)",
        )
        assert ok


class TestCriterion3Sampler:
    def test_sampler(self):
        with Timer() as t:
            dom = square_domain()
            lay = uniform_layout(dom, [3, 3, 3, 3], 0.075)
            mesh = generate_mesh(dom, lay, 0.2, 0.1, seed=1)
            a, b, c = 0.2, 0.28, 0.002
            prior = build_covariance(mesh, a, b, c)
            diag_exact = bool(np.all(np.diag(prior.Gamma) == a + c))
            spd = np.isfinite(prior.chol_lower).all()
            z = ContactImpedances.uniform(12, 1e-5)
            proto = adjacent_protocol(12)
            _, beta = one_step_gauss_newton(
                mesh, np.full(mesh.n_nodes, 2.0), prior, z, proto
            )
        ok = report(
            "criterion-3",
            diag_exact and spd and beta == 0.0 and t.seconds < 10,
            f"Gamma diag == a+c: {diag_exact}, Cholesky ok: {bool(spd)}, "
            f"constant-sample beta = {beta}, {t.seconds:.1f}s (<10s)",
        )
        assert ok


class TestCriterion4NetworkMachinery:
    def test_network_machinery(self):
        with Timer() as t:
            huang_ok = huang_layer_sizes(12, 2000) == (191, 143)

            arch = NetworkArchitecture(hidden1=7, hidden2=5, output_dim=4)
            rng = np.random.default_rng(0)
            X = rng.standard_normal((40, 2))
            Y = rng.standard_normal((40, 4))
            p = _pack(*_init_params(arch, rng))
            _, g = loss_and_gradient(p, X, Y, arch, 0.01)
            worst = 0.0
            for i in rng.choice(len(p), 30, replace=False):
                h = 1e-6 * max(abs(p[i]), 1e-3)
                pp, pm = p.copy(), p.copy()
                pp[i] += h
                pm[i] -= h
                fd = (
                    loss_and_gradient(pp, X, Y, arch, 0.01)[0]
                    - loss_and_gradient(pm, X, Y, arch, 0.01)[0]
                ) / (2 * h)
                worst = max(worst, abs(g[i] - fd) / max(abs(fd), 1e-12))

            rng = np.random.default_rng(1)
            A = np.array([[0.08, 0.01], [-0.05, 0.02], [0.03, -0.015], [0.06, 0.005]])
            bvec = np.array([0.4, 0.6, 0.3, 0.5])
            theta = np.column_stack([10 ** rng.uniform(1, 6, 500), rng.uniform(0.1, 50, 500)])
            feats = np.column_stack([np.log10(theta[:, 0]), theta[:, 1]])
            ts = TrainingSet(E_bar=(feats @ A.T + bvec).T, Theta_bar=theta.T, manifest={})
            net = train(
                ts,
                NetworkArchitecture(hidden1=16, hidden2=12, output_dim=4),
                TrainConfig(alpha=1e-6, max_epochs=3000, seed=3),
            )
            val_mse = net.record["validation_curve"][-1]

        ok = report(
            "criterion-4",
            huang_ok and worst <= 1e-5 and val_mse <= 1e-4 and t.seconds < 120,
            f"huang(12,2000)==(191,143): {huang_ok}, loss-grad FD {worst:.2e} (<=1e-5), "
            f"linear-task val MSE {val_mse:.2e} (<=1e-4), {t.seconds:.1f}s (<2min)",
        )
        assert ok


class TestCriterion5SquareExperiment:
    def test_square_experiment(self, square_experiment):
        r = square_experiment
        ok = report(
            "criterion-5",
            r["mu_ratio"] > 1.0
            and r["kH_reduction"] > 0.0
            and r["kR_reduction"] > 0.0
            and r["seconds"] < 1800,
            f"mu ratio {r['mu_ratio']:.3f} (>1), kappa_H reduction "
            f"{100 * r['kH_reduction']:.1f}% (>0), kappa_R reduction "
            f"{100 * r['kR_reduction']:.2f}% (>0), {r['seconds']:.0f}s (<30min)",
        )
        assert ok


class TestCriterion6RectangleExperiment:
    def test_rectangle_experiment(self, rect_experiments, square_experiment):
        families, seconds = rect_experiments
        mu_votes = [f["mu_ratio"] > 1.0 for f in families]
        kh_votes = [
            f["kH_reduction"] > square_experiment["kH_reduction"] for f in families
        ]
        mu_ok = sum(mu_votes) >= 2
        kh_ok = sum(kh_votes) >= 2
        detail = ", ".join(
            f"family {i + 1}: mu {f['mu_ratio']:.2f}, kH red {100 * f['kH_reduction']:.1f}%"
            for i, f in enumerate(families)
        )
        ok = report(
            "criterion-6",
            mu_ok and kh_ok and seconds < 1800,
            f"majority mu>1: {mu_votes}, majority kH-red > square's "
            f"({100 * square_experiment['kH_reduction']:.1f}%): {kh_votes} | {detail} | "
            f"{seconds:.0f}s (<30min)",
        )
        assert ok


class TestCriterion7TriangleExperiment:
    def test_triangle_experiment(self, triangle_experiment):
        r = triangle_experiment
        ok = report(
            "criterion-7",
            r["mu_ratio"] >= 1.0 and r["kH_reduction"] > 0.0 and r["seconds"] < 1800,
            f"mu ratio {r['mu_ratio']:.3f} (>=1, logged), kappa_H reduction "
            f"{100 * r['kH_reduction']:.1f}% (>0), {r['seconds']:.0f}s (<30min)",
        )
        assert ok


class TestCriterion8Distinguishability:
    def test_distinguishability(self, rect_experiments):
        families, _ = rect_experiments
        r = families[0]
        cfg, dom, z, proto = r["cfg"], r["dom"], r["z"], r["proto"]
        with Timer() as t:
            ref, fields = metric_fields(
                dom, cfg.raw["metrics"]["ref_spacing"], 100, cfg.prior_params,
                cfg.seed("metrics") + 1,
            )
            from eitopt.mesh import interpolate_field
            from eitopt.sampler import rescale_to_range

            wins = {}
            for label, h in (("coarse", cfg.h_max), ("fine", cfg.h_max / 2)):
                mo = generate_mesh(dom, r["optimized"], h, h / 2, seed=cfg.seed("mesh"))
                mu_ = generate_mesh(dom, r["uniform"], h, h / 2, seed=cfg.seed("mesh"))
                w = 0
                for i in range(50):
                    s1 = rescale_to_range(fields[i], 1.0, 2.0)
                    ds = rescale_to_range(fields[50 + i], 1.0, 2.0)
                    d_o = distinguishability(
                        mo, interpolate_field(s1, ref, mo), interpolate_field(ds, ref, mo), z, proto
                    )
                    d_u = distinguishability(
                        mu_, interpolate_field(s1, ref, mu_), interpolate_field(ds, ref, mu_), z, proto
                    )
                    w += d_o > d_u
                wins[label] = w / 50.0
        ok = report(
            "criterion-8",
            wins["coarse"] >= 0.6 and wins["fine"] >= 0.6 and t.seconds < 600,
            f"delta win rates coarse {wins['coarse']:.2f}, fine {wins['fine']:.2f} "
            f"(both >=0.6), {t.seconds:.0f}s (<10min)",
        )
        assert ok


class TestCriterion9ReconstructionStudy:
    def test_reconstruction_study(self, rect_experiments):
        families, _ = rect_experiments
        r = families[0]
        with Timer() as t:
            study = reconstruction_study(
                r["cfg"], {"optimized": r["optimized"], "standard": r["uniform"]}
            )
        cells = {(c["layout"], c["target"], c["eta"]): c for c in study["cells"]}

        def rmse_of(layout, target, eta):
            return cells[(layout, target, eta)]["rmse_percent"]

        blob_5 = rmse_of("optimized", "blob", 0.05) <= rmse_of("standard", "blob", 0.05)
        blob_10 = rmse_of("optimized", "blob", 0.1) <= rmse_of("standard", "blob", 0.1)
        ell_gap_1 = abs(rmse_of("optimized", "ellipse", 0.01) - rmse_of("standard", "ellipse", 0.01))
        blob_gap_10 = abs(rmse_of("optimized", "blob", 0.1) - rmse_of("standard", "blob", 0.1))
        positive = all(c["sigma_min"] > 0 for c in study["cells"])
        monotone = all(c["cost_monotone"] for c in study["cells"])

        detail_rmse = "; ".join(
            f"{lt}/{tg}@{eta:g}: {cells[(lt, tg, eta)]['rmse_percent']:.2f}%"
            for lt in ("optimized", "standard")
            for tg in ("blob",)
            for eta in (0.01, 0.05, 0.1)
        )
        ok = report(
            "criterion-9",
            blob_5 and blob_10 and ell_gap_1 < blob_gap_10 and positive and monotone
            and t.seconds < 1200,
            f"blob RMSE opt<=std at 5%: {blob_5}, at 10%: {blob_10}; ellipse@1% gap "
            f"{ell_gap_1:.2f} < blob@10% gap {blob_gap_10:.2f}: {ell_gap_1 < blob_gap_10}; "
            f"sigma>0: {positive}; cost monotone: {monotone} | {detail_rmse} | "
            f"{t.seconds:.0f}s (<20min)",
        )
        assert ok


class TestCriterion10Reproducibility:
    def test_reproducibility(self, tmp_path):
        cfg = preset_config(
            "square-1x1",
            dataset={"n_layouts": 2, "n_sigma": 2},
            h_max=0.2, h_min=0.1,
            metrics={"kappa_samples": 2, "mu_samples": 2, "delta_pairs": 3, "ref_spacing": 0.12},
            train={"max_epochs": 40},
            recon={"fine_h": 0.13, "coarse_h": 0.2, "noise_levels": [0.05],
                   "sample_spacing": 0.13},
        )
        cfgpath = tmp_path / "config.json"
        cfgpath.write_text(cfg.to_json())
        outs = [tmp_path / "run1", tmp_path / "run2"]
        for out in outs:
            for cmd in ("gen-data", "train", "optimize", "evaluate", "reconstruct"):
                code = cli_main([cmd, "--config", str(cfgpath), "--out", str(out)])
                assert code == 0, cmd
        compared = []
        for name in (
            "E_bar.csv", "Theta_bar.csv", "manifest.json", "network.json",
            "training_record.csv", "layout_optimized.csv", "layout_uniform.csv",
            "evaluation.json", "evaluation.csv", "rmse_table.json", "rmse_table.csv",
        ):
            same = (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
            compared.append((name, same))
        ok = report(
            "criterion-10",
            all(same for _, same in compared),
            "byte-identical: " + ", ".join(f"{n}={'yes' if s else 'NO'}" for n, s in compared),
        )
        assert ok
