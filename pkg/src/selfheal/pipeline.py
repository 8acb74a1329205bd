"""Experiment orchestration: bound-verification suites, the robustness
harness, stage execution for `run`, and the deterministic report writers.

Reports carry provenance (config hash, seed, version) and serialize all
numbers with 17 significant digits, so a rerun with the same seed yields
byte-identical files.
"""

import hashlib
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import __version__, bounds, datagen, margins
from .attacks import AttackConfig, attack_controlled, bare_model_fn, pgd_batch
from .control import ControlObjective, PmpConfig, controlled_predict, solve_pmp
from .data import LabeledDataset, TrainConfig, load_dataset_csv, save_dataset_csv
from .dynamics import layer_value, load_net, predict_batch, save_net
from .embedding import (
    QuadraticSubmersion,
    fit_autoencoder,
    fit_pca,
    load_embeddings,
    save_embeddings,
)
from .numerics import norm2, spawn_rng


def _floatify(obj):
    """Parse the 17-digit decimal strings of a stored report back to floats."""
    if isinstance(obj, dict):
        return {k: _floatify(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_floatify(v) for v in obj]
    if isinstance(obj, str):
        try:
            return float(obj)
        except ValueError:
            return obj
    return obj


def _num(x):
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return format(float(x), ".17g")


def _jsonable(obj):
    """Recursively convert numpy scalars/arrays and format floats as strings."""
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        return _num(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def write_json(doc, path):
    with open(path, "w") as fh:
        json.dump(_jsonable(doc), fh, indent=1, sort_keys=True)
        fh.write("\n")


def config_hash(cfg):
    blob = json.dumps(_jsonable(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# bound-verification suites (verify-bounds subcommand and acceptance tests)


def thm1_suite(trials=1000, seed=0, orthogonal_trials=200):
    """Random linear systems: bound violations and the orthogonal equality."""
    cases = []
    violations = 0
    vacuous = 0
    max_gap = -math.inf
    for trial in range(trials):
        sys_, z = bounds.random_linear_system(seed, trial)
        cert = bounds.theorem1_certificate(sys_, z)
        if not cert.holds:
            violations += 1
        if cert.vacuous:
            vacuous += 1
        for e, b in zip(cert.empirical, cert.bound):
            if math.isfinite(b):
                max_gap = max(max_gap, e - b)
        cases.append(
            {
                "trial": trial,
                "c": sys_.c,
                "depth": sys_.depth,
                "dim": sys_.dim,
                "alpha": cert.alpha,
                "gamma": cert.gamma,
                "kappa": cert.kappa,
                "bound": cert.bound,
                "empirical": cert.empirical,
                "holds": cert.holds,
                "vacuous": cert.vacuous,
            }
        )

    eq_defect = 0.0
    for trial in range(orthogonal_trials):
        sys_, z = bounds.random_linear_system(seed + 1, trial, orthogonal=True)
        errs = bounds.simulate_linear_controlled(sys_, z)
        z_par, z_perp = bounds.perturbation_split(z, sys_.bases[0])
        a = sys_.alpha
        npar = float(np.dot(z_par, z_par))
        nperp = float(np.dot(z_perp, z_perp))
        for t in range(1, sys_.depth + 1):
            expect = a ** (2 * t) * nperp + npar
            eq_defect = max(eq_defect, abs(errs[t] ** 2 - expect))

    return {
        "suite": "thm1",
        "trials": trials,
        "violations": violations,
        "vacuous": vacuous,
        "max_empirical_minus_bound": max_gap,
        "orthogonal_trials": orthogonal_trials,
        "orthogonal_equality_max_defect": eq_defect,
        "cases": cases,
    }


def thm2_suite(trials=100, seed=0, eps_fraction=0.5):
    """Random tanh nets with anchored quadratic manifolds, eps at a fraction
    of the admissibility threshold."""
    cases = []
    violations = 0
    for trial in range(trials):
        net, embs, x0, v, c = bounds.random_nonlinear_instance(seed, trial)
        threshold = bounds.theorem2_threshold(net, embs, x0, v, c)
        eps = eps_fraction * threshold if math.isfinite(threshold) else 1e-2
        cert = bounds.theorem2_certificate(net, embs, x0, v, eps, c)
        if not cert.holds:
            violations += 1
        cases.append(
            {
                "trial": trial,
                "c": c,
                "depth": net.depth,
                "dim": net.in_dim,
                "eps": cert.eps,
                "eps_threshold": cert.eps_threshold,
                "sigma": cert.sigma,
                "k": cert.k,
                "beta": cert.beta,
                "delta": cert.delta,
                "gamma": cert.gamma,
                "kappa": cert.kappa,
                "theta_norms": cert.theta_norms,
                "bound": cert.bound,
                "empirical": cert.empirical,
                "holds": cert.holds,
                "vacuous": cert.vacuous,
            }
        )
    return {"suite": "thm2", "trials": trials, "violations": violations, "cases": cases}


def _loglog_slope(xs, ys):
    lx = np.log(np.asarray(xs))
    ly = np.log(np.asarray(ys))
    lx = lx - lx.mean()
    return float(np.dot(lx, ly - ly.mean()) / np.dot(lx, lx))


def propc2_suite(seed=0, a_values=(0.25, 0.5, 1.0), eps_values=(0.05, 0.1, 0.2), c=0.1, dim=3, random_anchors=3):
    """Gap-vs-bound on quadratic manifolds plus the quadratic-scaling slope.

    Slopes are measured at the apex anchor, where odd-order terms cancel;
    the bound is additionally checked at random on-manifold anchors.
    """
    records = []
    slopes = {}
    max_ratio = 0.0
    for a in a_values:
        sub = QuadraticSubmersion.canonical(a, dim)
        rng = spawn_rng(seed, int(a * 1000))
        apex = np.zeros(dim)
        gaps = []
        for eps in eps_values:
            vt = bounds.tangent_basis(sub, apex) @ rng.standard_normal(dim - 1)
            vt = vt / norm2(vt)
            rec = bounds.propC2_check(sub, apex, vt, eps, c)
            gaps.append(rec.gap)
            max_ratio = max(max_ratio, rec.gap / rec.bound)
            records.append(
                {
                    "a": a, "anchor": "apex", "eps": eps, "c": c,
                    "gap": rec.gap, "bound": rec.bound,
                    "sigma": rec.sigma, "sigma_normalized": rec.sigma_normalized,
                    "holds": rec.gap <= rec.bound,
                }
            )
        slopes[str(a)] = _loglog_slope(eps_values, gaps)
        for j in range(random_anchors):
            w = rng.uniform(-0.6, 0.6, size=dim - 1)
            x_on = np.concatenate([w, [a * float(np.dot(w, w))]])
            for eps in eps_values:
                v = rng.standard_normal(dim)
                v = v / norm2(v)
                rec = bounds.propC2_check(sub, x_on, v, eps, c)
                max_ratio = max(max_ratio, rec.gap / rec.bound)
                records.append(
                    {
                        "a": a, "anchor": f"random-{j}", "eps": eps, "c": c,
                        "gap": rec.gap, "bound": rec.bound,
                        "sigma": rec.sigma, "sigma_normalized": rec.sigma_normalized,
                        "holds": rec.gap <= rec.bound,
                    }
                )
    return {
        "suite": "propC2",
        "max_gap_over_bound": max_ratio,
        "slopes": slopes,
        "all_hold": all(r["holds"] for r in records),
        "records": records,
    }


def propc4_suite(trials=100, seed=0, eps_fraction=0.5, scaling_trial=0):
    """Linearization-error bound on random instances plus linear-net zeroing
    and the eps^2 scaling slope."""
    cases = []
    violations = 0
    for trial in range(trials):
        net, embs, x0, v, c = bounds.random_nonlinear_instance(seed, trial)
        threshold = bounds.theorem2_threshold(net, embs, x0, v, c)
        eps = eps_fraction * threshold if math.isfinite(threshold) else 1e-2
        rec = bounds.linearization_error_series(net, embs, x0, v, eps, c)
        if not rec.holds:
            violations += 1
        cases.append(
            {
                "trial": trial,
                "c": c,
                "eps": eps,
                "eps_threshold": rec.eps_threshold,
                "errors": rec.errors,
                "bound": rec.bound,
                "holds": rec.holds,
            }
        )

    net, embs, x0, v, c = bounds.random_nonlinear_instance(seed, scaling_trial, linear=True)
    lin = bounds.linearization_error_series(net, embs, x0, v, 0.05, c)
    linear_max_error = max(lin.errors)

    net, embs, x0, v, c = bounds.random_nonlinear_instance(seed + 1, scaling_trial)
    threshold = bounds.theorem2_threshold(net, embs, x0, v, c)
    eps_list = [threshold / 4.0, threshold / 8.0, threshold / 16.0]
    peaks = []
    for eps in eps_list:
        rec = bounds.linearization_error_series(net, embs, x0, v, eps, c)
        peaks.append(max(rec.errors))
    return {
        "suite": "propC4",
        "trials": trials,
        "violations": violations,
        "linear_net_max_error": linear_max_error,
        "scaling_eps": eps_list,
        "scaling_errors": peaks,
        "scaling_slope": _loglog_slope(eps_list, peaks),
        "cases": cases,
    }


BOUND_SUITES = {
    "thm1": thm1_suite,
    "thm2": thm2_suite,
    "propC2": propc2_suite,
    "propC4": propc4_suite,
}


def run_bound_suite(name, trials, seed):
    if name == "thm1":
        return thm1_suite(trials=trials, seed=seed)
    if name == "thm2":
        return thm2_suite(trials=trials, seed=seed)
    if name == "propC2":
        return propc2_suite(seed=seed)
    if name == "propC4":
        return propc4_suite(trials=trials, seed=seed)
    raise ValueError(f"unknown suite {name!r}; choose from {sorted(BOUND_SUITES)}")


# ---------------------------------------------------------------------------
# controlled-model evaluation and the robustness harness


def fit_layer_embeddings(net, data, kind="pca", r=1, train_cfg=None, hidden=(16,)):
    """One embedding per control site: the raw inputs and each hidden state
    reached by the uncontrolled forward pass."""
    states = [data.points]
    cur = data.points
    for layer in net.layers[:-1]:
        from .dynamics import layer_value_batch

        cur = layer_value_batch(layer, cur)
        states.append(cur)
    embeddings = []
    for t, xs in enumerate(states):
        if kind == "pca":
            embeddings.append(fit_pca(xs, min(r, xs.shape[1] - 1)))
        elif kind == "autoencoder":
            cfg = train_cfg or TrainConfig()
            embeddings.append(fit_autoencoder(xs, r, cfg, hidden=hidden))
        else:
            raise ValueError("embedding kind must be 'pca' or 'autoencoder'")
    return embeddings


def controlled_predict_batch(net, embeddings, points, pmp_cfg):
    objective = ControlObjective(embeddings=list(embeddings), c=pmp_cfg.c)
    return np.array(
        [controlled_predict(net, objective, points[i], pmp_cfg) for i in range(points.shape[0])]
    )


def accuracy(preds, labels):
    return float(np.mean(np.asarray(preds) == np.asarray(labels)))


def robustness_harness(net, embeddings, data, eps_by_norm, pmp_cfg, steps=40, seeds=(0, 1, 2, 3, 4)):
    """Oblivious-threat comparison: PGD built on the bare model, evaluated
    on both the bare and the controlled model, per norm and seed."""
    model = bare_model_fn(net)
    clean_base = accuracy(predict_batch(net, data.points), data.labels)
    clean_ctrl = accuracy(
        controlled_predict_batch(net, embeddings, data.points, pmp_cfg), data.labels
    )
    per_seed = []
    for seed in seeds:
        row = {"seed": int(seed)}
        for norm, eps in eps_by_norm.items():
            cfg = AttackConfig(norm=norm, eps=eps, steps=steps, seed=int(seed))
            res = pgd_batch(model, data.points, data.labels, cfg)
            base_acc = accuracy(predict_batch(net, res.points), data.labels)
            ctrl_acc = accuracy(
                controlled_predict_batch(net, embeddings, res.points, pmp_cfg), data.labels
            )
            row[f"adv_baseline_{norm}"] = base_acc
            row[f"adv_controlled_{norm}"] = ctrl_acc
        per_seed.append(row)
    return {
        "clean_baseline": clean_base,
        "clean_controlled": clean_ctrl,
        "clean_drop": clean_base - clean_ctrl,
        "per_seed": per_seed,
        "eps_by_norm": dict(eps_by_norm),
        "steps": steps,
    }


# ---------------------------------------------------------------------------
# pipeline stages for `run`


class StageError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"stage {stage!r}: {message}")
        self.stage = stage


def _artifact(out_dir, name):
    return os.path.join(out_dir, name)


def _needs_run(inputs, outputs, force):
    if force:
        return True
    if not outputs or not all(os.path.exists(p) for p in outputs):
        return True
    if not inputs:
        return False
    newest_in = max(os.path.getmtime(p) for p in inputs)
    oldest_out = min(os.path.getmtime(p) for p in outputs)
    return newest_in > oldest_out


def run_pipeline(config, out_dir, force=False):
    """Execute the configured stages in order; returns the metrics report."""
    os.makedirs(out_dir, exist_ok=True)
    seed = int(config.get("seed", 0))
    metrics = {}
    for stage_cfg in config.get("pipeline", []):
        kind = stage_cfg.get("stage")
        name = stage_cfg.get("name", kind)
        runner = _STAGES.get(kind)
        if runner is None:
            raise StageError(name, f"unknown stage kind {kind!r}")
        try:
            stage_metrics = runner(stage_cfg, out_dir, seed, force)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, str(exc)) from exc
        for key, value in stage_metrics.items():
            metrics[f"{name}.{key}"] = value
    report = {
        "version": __version__,
        "config_hash": config_hash(config),
        "seed": seed,
        "metrics": metrics,
    }
    write_json(report, _artifact(out_dir, "report.json"))
    _write_report_csv(metrics, _artifact(out_dir, "report.csv"))
    return report


def _write_report_csv(metrics, path):
    lines = ["metric,value"]
    for key in sorted(metrics):
        value = metrics[key]
        if isinstance(value, (bool, np.bool_)):
            text = "true" if value else "false"
        elif isinstance(value, (int, np.integer)):
            text = str(int(value))
        elif isinstance(value, (float, np.floating)):
            text = _num(float(value))
        else:
            text = str(value)
        lines.append(f"{key},{text}")
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def _stage_generate(cfg, out_dir, seed, force):
    out = _artifact(out_dir, cfg.get("out", "data.csv"))
    spec = datagen.SyntheticSpec(
        kind=cfg["kind"],
        d=int(cfg.get("d", 2)),
        r=int(cfg.get("r", 1)),
        n_per_class=int(cfg.get("n_per_class", 50)),
        noise=float(cfg.get("noise", 0.0)),
        seed=int(cfg.get("seed", seed)),
        gap=float(cfg.get("gap", 3.0)),
        spread=float(cfg.get("spread", 1.0)),
        radius=float(cfg.get("radius", 2.0)),
        amplitude=float(cfg.get("amplitude", 0.8)),
        frequency=float(cfg.get("frequency", 1.2)),
    )
    if _needs_run([], [out], force):
        save_dataset_csv(datagen.generate(spec), out)
    data = load_dataset_csv(out)
    return {"n": data.n, "dim": data.dim}


def _train_cfg(cfg, seed):
    return TrainConfig(
        epochs=int(cfg.get("epochs", 200)),
        batch_size=int(cfg.get("batch_size", 16)),
        lr=float(cfg.get("lr", 0.05)),
        momentum=float(cfg.get("momentum", 0.9)),
        seed=int(cfg.get("seed", seed)),
    )


def _stage_train(cfg, out_dir, seed, force):
    data_path = _artifact(out_dir, cfg.get("data", "data.csv"))
    out = _artifact(out_dir, cfg.get("out", "model.json"))
    data = load_dataset_csv(data_path)
    arch = datagen.ClassifierArch(
        hidden=tuple(cfg.get("hidden", [16])),
        activation=cfg.get("activation", "tanh"),
        n_classes=int(cfg.get("n_classes", data.n_classes())),
    )
    if _needs_run([data_path], [out], force):
        result = datagen.train_classifier(data, arch, _train_cfg(cfg, seed))
        save_net(result.net, out)
        acc = result.train_accuracy
    else:
        net = load_net(out)
        from .dynamics import logits_batch

        outs, _ = logits_batch(net, data.points)
        acc = accuracy(np.argmax(outs, axis=1), data.labels)
    return {"train_accuracy": acc}


def _stage_fit_embedding(cfg, out_dir, seed, force):
    data_path = _artifact(out_dir, cfg.get("data", "data.csv"))
    out = _artifact(out_dir, cfg.get("out", "embeddings.json"))
    inputs = [data_path]
    model_path = cfg.get("model")
    if model_path:
        model_path = _artifact(out_dir, model_path)
        inputs.append(model_path)
    if _needs_run(inputs, [out], force):
        data = load_dataset_csv(data_path)
        kind = cfg.get("kind", "pca")
        r = int(cfg.get("r", 1))
        if model_path:
            net = load_net(model_path)
            embeddings = fit_layer_embeddings(
                net,
                data,
                kind=kind,
                r=r,
                train_cfg=_train_cfg(cfg, seed),
                hidden=tuple(cfg.get("hidden", [16])),
            )
        elif kind == "pca":
            embeddings = [fit_pca(data.points, r)]
        else:
            embeddings = [
                fit_autoencoder(
                    data.points, r, _train_cfg(cfg, seed), hidden=tuple(cfg.get("hidden", [16]))
                )
            ]
        save_embeddings(embeddings, out)
    embeddings = load_embeddings(out)
    metrics = {"count": len(embeddings)}
    for i, e in enumerate(embeddings):
        err = getattr(e, "train_error", None)
        if err is not None and not (isinstance(err, float) and math.isnan(err)):
            metrics[f"train_error_{i}"] = float(err)
    return metrics


def _pmp_cfg(cfg):
    return PmpConfig(
        max_itr=int(cfg.get("max_itr", 3)),
        inner_itr=int(cfg.get("inner_itr", 10)),
        lr=float(cfg.get("pmp_lr", 0.1)),
        c=float(cfg.get("c", 0.001)),
    )


def _stage_control(cfg, out_dir, seed, force):
    model_path = _artifact(out_dir, cfg.get("model", "model.json"))
    emb_path = _artifact(out_dir, cfg.get("embeddings", "embeddings.json"))
    data_path = _artifact(out_dir, cfg.get("data", "data.csv"))
    out = _artifact(out_dir, cfg.get("out", "controlled.csv"))
    net = load_net(model_path)
    embeddings = load_embeddings(emb_path)
    data = load_dataset_csv(data_path)
    pmp = _pmp_cfg(cfg)
    objective = ControlObjective(embeddings=embeddings, c=pmp.c)
    if _needs_run([model_path, emb_path, data_path], [out], force):
        rows = []
        for i in range(data.n):
            sol = solve_pmp(net, objective, data.points[i], pmp)
            logits = layer_value(net.head, sol.trajectory.states[-1])
            pred = int(np.argmax(logits))
            rows.append((sol.trajectory.states[-1], pred, sol.objective_history[-1]))
        d_out = rows[0][0].shape[0]
        header = ",".join(
            [f"x{i + 1}" for i in range(d_out)] + ["prediction", "objective"]
        )
        lines = [header]
        for state, pred, obj in rows:
            lines.append(
                ",".join([_num(v) for v in state] + [str(pred), _num(obj)])
            )
        with open(out, "w", newline="") as fh:
            fh.write("\n".join(lines) + "\n")
    preds = controlled_predict_batch(net, embeddings, data.points, pmp)
    return {"controlled_accuracy": accuracy(preds, data.labels)}


def _stage_attack(cfg, out_dir, seed, force):
    model_path = _artifact(out_dir, cfg.get("model", "model.json"))
    data_path = _artifact(out_dir, cfg.get("data", "data.csv"))
    out = _artifact(out_dir, cfg.get("out", "adv.csv"))
    net = load_net(model_path)
    data = load_dataset_csv(data_path)
    acfg = AttackConfig(
        norm=cfg.get("norm", "linf"),
        eps=float(cfg.get("eps", 0.1)),
        steps=int(cfg.get("steps", 50)),
        threat=cfg.get("threat", "oblivious"),
        seed=int(cfg.get("seed", seed)),
        greedy_only=bool(cfg.get("greedy_only", False)),
    )
    inputs = [model_path, data_path]
    if acfg.threat == "whitebox":
        emb_path = _artifact(out_dir, cfg.get("embeddings", "embeddings.json"))
        inputs.append(emb_path)
    if _needs_run(inputs, [out], force):
        if acfg.threat == "whitebox":
            embeddings = load_embeddings(emb_path)
            res = attack_controlled(net, embeddings, _pmp_cfg(cfg), data.points, data.labels, acfg)
        else:
            res = pgd_batch(bare_model_fn(net), data.points, data.labels, acfg)
        adv = LabeledDataset(
            points=res.points, labels=data.labels, manifold_tag=res.success.astype(np.int64)
        )
        save_dataset_csv(adv, out)
    adv = load_dataset_csv(out)
    return {"attack_success_rate": float(np.mean(adv.manifold_tag))}


def _stage_margins(cfg, out_dir, seed, force):
    model_path = _artifact(out_dir, cfg.get("model", "model.json"))
    data_path = _artifact(out_dir, cfg.get("data", "data.csv"))
    out = _artifact(out_dir, cfg.get("out", "margins.json"))
    inputs = [model_path, data_path]
    emb_path = cfg.get("embedding")
    if emb_path:
        emb_path = _artifact(out_dir, emb_path)
        inputs.append(emb_path)
    if _needs_run(inputs, [out], force):
        net = load_net(model_path)
        data = load_dataset_csv(data_path)
        embedding = load_embeddings(emb_path)[0] if emb_path else None
        report = margins.margin_report(
            net,
            data,
            embedding=embedding,
            knn=int(cfg.get("knn", 8)),
            cfg=margins.MarginConfig(seed=int(cfg.get("seed", seed))),
        )
        write_json(report.as_dict(), out)
    with open(out) as fh:
        doc = json.load(fh)
    return {
        "d_euclid": float(doc["d_euclid"]),
        "d_manifold": float(doc["d_manifold"]),
        "d_projection": float(doc["d_projection"]),
    }


def _stage_verify_bounds(cfg, out_dir, seed, force):
    out = _artifact(out_dir, cfg.get("out", f"cert-{cfg['suite']}.json"))
    if _needs_run([], [out], force):
        doc = run_bound_suite(
            cfg["suite"], int(cfg.get("trials", 100)), int(cfg.get("seed", seed))
        )
        write_json(doc, out)
    with open(out) as fh:
        doc = json.load(fh)
    metrics = {}
    for key in ("violations", "max_gap_over_bound", "all_hold", "scaling_slope"):
        if key in doc:
            value = doc[key]
            metrics[key] = float(value) if isinstance(value, str) else value
    return metrics


def _stage_fig2(cfg, out_dir, seed, force):
    grid_out = _artifact(out_dir, cfg.get("grid_out", "fig2-field.csv"))
    rec = margins.fig2_toy(seed=int(cfg.get("seed", seed)))
    if _needs_run([], [grid_out], force):
        lines = ["x1,x2,loss"]
        for x1, x2, loss in rec.grid_field:
            lines.append(f"{_num(x1)},{_num(x2)},{_num(loss)}")
        with open(grid_out, "w", newline="") as fh:
            fh.write("\n".join(lines) + "\n")
    return {
        "clean_accuracy": rec.clean_accuracy,
        "adversarial_accuracy": rec.adversarial_accuracy,
        "controlled_adversarial_accuracy": rec.controlled_adversarial_accuracy,
        "euclid_margin": rec.euclid_margin,
        "projection_margin": rec.projection_margin,
    }


def _stage_prop1(cfg, out_dir, seed, force):
    metrics = {}
    for r, d in cfg.get("cases", [[1, 2], [2, 10], [5, 50]]):
        est = margins.prop1_monte_carlo(
            int(r), int(d), int(cfg.get("n_samples", 100_000)), int(cfg.get("seed", seed))
        )
        metrics[f"mean_sin_r{r}_d{d}"] = est.mean_sin
        metrics[f"bound_r{r}_d{d}"] = est.bound
        metrics[f"mean_sin_sq_r{r}_d{d}"] = est.mean_sin_sq
        metrics[f"within_bound_r{r}_d{d}"] = est.mean_sin <= est.bound + 3 * est.se_sin
    return metrics


def _stage_robustness(cfg, out_dir, seed, force):
    model_path = _artifact(out_dir, cfg.get("model", "model.json"))
    emb_path = _artifact(out_dir, cfg.get("embeddings", "embeddings.json"))
    data_path = _artifact(out_dir, cfg.get("data", "data.csv"))
    out = _artifact(out_dir, cfg.get("out", "robustness.json"))
    eps_by_norm = {k: float(v) for k, v in cfg.get(
        "eps", {"linf": 0.1, "l2": 0.25, "l1": 0.5}
    ).items()}
    if _needs_run([model_path, emb_path, data_path], [out], force):
        net = load_net(model_path)
        embeddings = load_embeddings(emb_path)
        data = load_dataset_csv(data_path)
        doc = robustness_harness(
            net,
            embeddings,
            data,
            eps_by_norm,
            _pmp_cfg(cfg),
            steps=int(cfg.get("steps", 40)),
            seeds=tuple(cfg.get("seeds", [0, 1, 2, 3, 4])),
        )
        write_json(doc, out)
    with open(out) as fh:
        doc = json.load(fh)
    doc = _floatify(doc)
    metrics = {
        "clean_baseline": doc["clean_baseline"],
        "clean_controlled": doc["clean_controlled"],
        "clean_drop": doc["clean_drop"],
    }
    for norm in eps_by_norm:
        base = min(row[f"adv_baseline_{norm}"] for row in doc["per_seed"])
        ctrl = min(row[f"adv_controlled_{norm}"] for row in doc["per_seed"])
        metrics[f"adv_baseline_{norm}_min"] = base
        metrics[f"adv_controlled_{norm}_min"] = ctrl
    return metrics


_STAGES = {
    "generate": _stage_generate,
    "train": _stage_train,
    "fit-embedding": _stage_fit_embedding,
    "control": _stage_control,
    "attack": _stage_attack,
    "margins": _stage_margins,
    "verify-bounds": _stage_verify_bounds,
    "fig2": _stage_fig2,
    "prop1": _stage_prop1,
    "robustness": _stage_robustness,
}


def compare_reports(a, b):
    """Side-by-side metric deltas; missing metrics are flagged, not fatal."""
    if a.get("version") != b.get("version"):
        raise ValueError(
            f"report schema mismatch: {a.get('version')!r} vs {b.get('version')!r}"
        )
    am, bm = a.get("metrics", {}), b.get("metrics", {})
    rows = []
    for key in sorted(set(am) | set(bm)):
        if key not in am or key not in bm:
            rows.append({"metric": key, "status": "missing", "a": am.get(key), "b": bm.get(key)})
            continue
        va, vb = am[key], bm[key]
        try:
            fa, fb = float(va), float(vb)
            rows.append({"metric": key, "status": "ok", "a": fa, "b": fb, "delta": fb - fa})
        except (TypeError, ValueError):
            rows.append(
                {"metric": key, "status": "ok" if va == vb else "differs", "a": va, "b": vb}
            )
    return rows
