"""The four scenario pipelines. Each returns a :class:`RunReport` and writes its
CSV files plus ``report.json`` into the output directory."""

from __future__ import annotations

import math
import time
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..array import (ArrayScenario, Desired, Interferer, applebaum_modified_cost,
                     dolph_chebyshev_amplitudes, estimate_covariance, phase_from_delay,
                     phasor_at, sinr, synthesize_received)
from ..circuit import solve_transient
from ..emport import (EXTRACTION_CALLS, band_max_abs, extract_port_response,
                      reflection_coefficient, save_port_response, solve_self_consistent, timed)
from ..errors import ConfigError, PortforgeError
from ..optimize import ga_minimize, select_min_sum, write_history_csv
from ..signals import (SourceSpec, bin_index, dft, one_sided,
                       relative_l1_spectral_error, relative_l2_difference, l2_difference,
                       sample_source, save_signal_csv, save_spectrum_csv)
from .config import GeneSet, ScenarioConfig, build_surrogate, render_template, source_vars
from .pipeline import combine, insert_filter, port_element, solve_many
from .report import RunReport, write_table_csv


def _out_dir(cfg: ScenarioConfig, out_dir) -> Path:
    out = Path(out_dir) if out_dir is not None else cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def _extract(cfg, sys, report, out):
    EXTRACTION_CALLS.reset()
    solver = cfg.surrogate.get("extract_solver", "direct")
    resp, t = timed(extract_port_response, sys, cfg.dt, cfg.n_steps, solver)
    report.timing("extraction", t)
    if cfg.surrogate.get("save_response", sys.dof <= 1000):
        report.artifact(save_port_response(resp, out / "port_response.csv"))
    return resp


def _finish(report, out, t_start):
    report.metric("extraction_calls", EXTRACTION_CALLS.count)
    report.timing("total", time.perf_counter() - t_start)
    report.artifacts.append(str(out / "report.json"))
    report.write(out)
    return report


def _template_values(cfg, src: SourceSpec | None = None, extra=None) -> dict:
    vals = source_vars(src or cfg.source)
    vals.update(cfg.netlist.get("params", {}))
    vals.update(extra or {})
    return vals


@contextmanager
def _labelled(phase):
    """Prefix solver errors with the pipeline phase they came from."""
    try:
        yield
    except PortforgeError as exc:
        exc.args = (f"{phase}: {exc.args[0] if exc.args else exc}",) + exc.args[1:]
        raise


# -- validation -------------------------------------------------------------------------

def run_validation(cfg: ScenarioConfig, out_dir=None) -> RunReport:
    t0 = time.perf_counter()
    out = _out_dir(cfg, out_dir)
    report = RunReport(cfg.kind, cfg.name, cfg.seed)
    sys = build_surrogate(cfg)
    with _labelled("extraction"):
        resp = _extract(cfg, sys, report, out)
    net = render_template(cfg.resolve(cfg.netlist["template"]), _template_values(cfg))
    with _labelled("port-extracted solve"):
        pe, t_pe = timed(solve_transient, net, cfg.dt, cfg.n_steps, cfg.newton, resp)
    with _labelled("self-consistent solve"):
        sc, t_sc = timed(solve_self_consistent, sys, net, cfg.dt, cfg.n_steps, cfg.newton,
                         cfg.surrogate.get("solver", "direct"))
    report.timing("port_extracted_solve", t_pe)
    report.timing("self_consistent_solve", t_sc)
    worst, worst_abs, peak = 0.0, 0.0, 0.0
    for port in net.ports:
        a, b = pe.element_voltage(port.name), sc.element_voltage(port.name)
        tag = f"_port{port.port_id}" if len(net.ports) > 1 else ""
        report.artifact(save_signal_csv(a, out / f"port_voltage_extracted{tag}.csv"))
        report.artifact(save_signal_csv(b, out / f"port_voltage_self_consistent{tag}.csv"))
        if np.any(b.samples):
            worst = max(worst, relative_l2_difference(a, b))
        worst_abs = max(worst_abs, l2_difference(a, b))
        peak = max(peak, float(np.max(np.abs(b.samples))))
    report.metric("relative_l2_difference", worst)
    report.metric("l2_difference", worst_abs)
    report.metric("peak_port_voltage", peak)
    report.metric("mean_joint_iterations", np.mean(sc.joint_iteration_counts))
    report.metric("max_newton_iterations", np.max(pe.newton_iteration_counts))
    return _finish(report, out, t0)


# -- reflection, multi-objective --------------------------------------------------------------

def _feed_net(cfg, genes: GeneSet, design, n_ports, src=None):
    tpl = cfg.resolve(cfg.netlist["template"])
    per = [render_template(tpl, _template_values(cfg, src, genes.for_port(design, p)))
           for p in range(n_ports)]
    return combine(per)


def _reflection_objectives(cfg, genes, design, result, n_ports, band):
    z0_fixed = cfg.section("reflection").get("z0")
    z0_gene = cfg.section("reflection").get("z0_gene", "R")
    vals = genes.for_port
    out, spectra = [], []
    for p in range(n_ports):
        el = port_element(result.netlist, p)
        z0 = float(z0_fixed) if z0_fixed is not None else float(vals(design, p)[z0_gene])
        g = reflection_coefficient(result.element_voltage(el.name), result.current(el.name),
                                   z0, *band)
        spectra.append(g)
        out.append(band_max_abs(g))
    return out, spectra


def run_reflection_multiobjective(cfg: ScenarioConfig, out_dir=None, threads: int = 1) -> RunReport:
    t0 = time.perf_counter()
    out = _out_dir(cfg, out_dir)
    report = RunReport(cfg.kind, cfg.name, cfg.seed)
    sys = build_surrogate(cfg)
    P = sys.n_ports
    with _labelled("extraction"):
        resp = _extract(cfg, sys, report, out)
    genes = GeneSet(cfg.genes, P)
    base = genes.baseline()
    if base is None:
        raise ConfigError("reflection scenario needs baseline values for every gene")
    band = (cfg.source.f0, cfg.source.fbw)

    def evaluate_batch(designs):
        nets = [_feed_net(cfg, genes, d, P) for d in designs]
        results = solve_many(nets, cfg.dt, cfg.n_steps, cfg.newton, resp, threads)
        objs = []
        for d, r in zip(designs, results):
            if r is None:
                objs.append(None)
                continue
            try:
                objs.append(_reflection_objectives(cfg, genes, d, r, P, band)[0])
            except PortforgeError:
                objs.append(None)
        return objs

    with _labelled("optimisation"):
        res, t_ga = timed(ga_minimize, cfg.ga, genes.bounds, evaluate_batch=evaluate_batch,
                          seeds=[base])
    report.timing("optimisation", t_ga)
    best = select_min_sum(res.best)
    finals = {}
    for tag, design in (("baseline", base), ("optimized", best.design)):
        r = solve_many([_feed_net(cfg, genes, design, P)], cfg.dt, cfg.n_steps, cfg.newton, resp)[0]
        objs, spectra = _reflection_objectives(cfg, genes, design, r, P, band)
        finals[tag] = objs
        for p, g in enumerate(spectra):
            report.artifact(save_spectrum_csv(g, out / f"gamma_port{p}_{tag}.csv"))
        for p, v in enumerate(objs):
            report.metric(f"{tag}_band_max_gamma_port{p}", v)
    report.metric("baseline_sum", sum(finals["baseline"]))
    report.metric("optimized_sum", sum(finals["optimized"]))
    report.metric("improvement_ratio", sum(finals["optimized"]) / sum(finals["baseline"]))
    for k, v in genes.flat(best.design).items():
        report.metric(f"optimized_{k}", v)
    report.metric("front_size", len(res.best))
    report.metric("evaluations", res.evaluations)
    report.artifact(write_history_csv(res.history, out / "ga_history.csv"))
    names = genes.bounds.names
    rows = [[*genes.flat(i.design).values(), *i.objectives] for i in res.best]
    report.artifact(write_table_csv(out / "pareto_front.csv",
                                    names + [f"band_max_gamma_port{p}" for p in range(P)], rows))
    return _finish(report, out, t0)


# -- nonlinear amplifier + filter -------------------------------------------------------------

def _harmonic_level(spec, f):
    return float(np.abs(spec.bins[bin_index(spec, f)]))


def run_nonlinear_filter(cfg: ScenarioConfig, out_dir=None, threads: int = 1) -> RunReport:
    t0 = time.perf_counter()
    out = _out_dir(cfg, out_dir)
    report = RunReport(cfg.kind, cfg.name, cfg.seed)
    sys = build_surrogate(cfg)
    if sys.n_ports != 1:
        raise ConfigError("nonlinear_filter expects a one-port surrogate")
    with _labelled("extraction"):
        resp = _extract(cfg, sys, report, out)
    ref_sec = cfg.section("reference")
    ref_src = SourceSpec(cfg.source.f0, cfg.source.fbw, float(ref_sec.get("amplitude", 1.0)))
    ref_net = render_template(cfg.resolve(ref_sec["template"]),
                              _template_values(cfg, ref_src, ref_sec.get("params", {})))
    filt = cfg.section("filter")
    r_hp, r_lp = float(filt["hp_shunt_R"]), float(filt["lp_series_R"])
    genes = GeneSet(cfg.genes, 1)
    tpl = cfg.resolve(cfg.netlist["template"])
    naive_params = dict(cfg.netlist.get("naive", {}))

    def amp_net(design):
        v = genes.physical(design)
        net = render_template(tpl, _template_values(cfg, extra=v))
        return insert_filter(net, v["n_hp"], v["C_hp"], r_hp, v["n_lp"], v["C_lp"], r_lp)

    with _labelled("reference solves"):
        ref = solve_transient(ref_net, cfg.dt, cfg.n_steps, cfg.newton, resp)
        naive_net = render_template(tpl, _template_values(cfg, extra=naive_params))
        naive = solve_transient(naive_net, cfg.dt, cfg.n_steps, cfg.newton, resp)
    v_ref = ref.element_voltage(ref_net.ports[0].name)
    v_naive = naive.element_voltage(naive_net.ports[0].name)
    S_ref, S_naive = dft(v_ref), dft(v_naive)

    def evaluate_batch(designs):
        nets = [amp_net(d) for d in designs]
        results = solve_many(nets, cfg.dt, cfg.n_steps, cfg.newton, resp, threads)
        return [None if r is None else
                relative_l1_spectral_error(dft(r.element_voltage(r.netlist.ports[0].name)), S_ref)
                for r in results]

    base = genes.baseline()
    with _labelled("optimisation"):
        res, t_ga = timed(ga_minimize, cfg.ga, genes.bounds, evaluate_batch=evaluate_batch,
                          seeds=[base] if base is not None else [])
    report.timing("optimisation", t_ga)
    best = res.best[0]
    opt_net = amp_net(best.design)
    opt = solve_transient(opt_net, cfg.dt, cfg.n_steps, cfg.newton, resp)
    v_opt = opt.element_voltage(opt_net.ports[0].name)
    S_opt = dft(v_opt)

    for tag, v, S in (("unamplified", v_ref, S_ref), ("naive", v_naive, S_naive),
                      ("optimized", v_opt, S_opt)):
        report.artifact(save_signal_csv(v, out / f"port_voltage_{tag}.csv"))
        report.artifact(save_spectrum_csv(one_sided(S), out / f"spectrum_{tag}.csv"))
    (out / "optimized_netlist.cir").write_text(opt_net.to_text())
    report.artifact(out / "optimized_netlist.cir")
    report.artifact(write_history_csv(res.history, out / "ga_history.csv"))

    f2 = 2 * cfg.source.f0
    h_ref, h_naive, h_opt = (_harmonic_level(S, f2) for S in (S_ref, S_naive, S_opt))
    report.metric("naive_error", relative_l1_spectral_error(S_naive, S_ref))
    report.metric("optimized_error", best.objectives[0])
    report.metric("harmonic_2f0_unamplified", h_ref)
    report.metric("harmonic_2f0_naive", h_naive)
    report.metric("harmonic_2f0_optimized", h_opt)
    report.metric("harmonic_2f0_naive_excess_dB", 20 * math.log10(h_naive / h_ref))
    for k, v in genes.flat(best.design).items():
        report.metric(f"optimized_{k}", v)
    report.metric("evaluations", res.evaluations)
    return _finish(report, out, t0)


# -- adaptive array SINR --------------------------------------------------------------------------

def _array_scenario(cfg: ScenarioConfig, n_ports: int):
    a = cfg.section("array")
    desired = Desired(math.radians(float(a.get("theta_d_deg", 0.0))),
                      SourceSpec(float(a["f0"]), float(a["fbw"]), float(a.get("amplitude", 1.0))))
    dwell = int(a.get("dwell", 50))
    n_steps = int(a.get("n_steps", 1000))
    if dwell < 1 or n_steps < dwell:
        raise ConfigError("[array] needs 1 <= dwell <= n_steps")
    interferers = []
    intf = a.get("interferer")
    if intf and intf.get("enabled", True):
        angles = [math.radians(float(x)) for x in intf["angles_deg"]]
        sched = tuple((k * dwell, angles[k % len(angles)]) for k in range(math.ceil(n_steps / dwell)))
        interferers.append(Interferer(sched, SourceSpec(float(intf["f0"]), float(intf["fbw"])),
                                      float(intf.get("power_dB", 20.0))))
    scen = ArrayScenario(n_ports, desired.waveform.f0, desired.waveform.fbw, desired,
                         tuple(interferers), float(a.get("noise_dB", -20.0)), cfg.seed, cfg.dt)
    return scen, dwell, n_steps


def run_adaptive_sinr(cfg: ScenarioConfig, out_dir=None, threads: int = 1) -> RunReport:
    t0 = time.perf_counter()
    out = _out_dir(cfg, out_dir)
    report = RunReport(cfg.kind, cfg.name, cfg.seed)
    sys = build_surrogate(cfg)
    N = sys.n_ports
    with _labelled("extraction"):
        resp = _extract(cfg, sys, report, out)
    scen, dwell, n_array = _array_scenario(cfg, N)
    a = cfg.section("array")
    f0 = scen.f0
    theta_d = scen.desired.theta
    taper = dolph_chebyshev_amplitudes(N, float(a.get("sidelobe_dB", 20.0)))
    margin = float(a.get("switch_margin", 2.0 / math.sqrt(dwell)))
    genes = GeneSet(cfg.genes, N)
    base = genes.baseline()
    if base is None:
        raise ConfigError("adaptive scenario needs baseline values for every gene")
    v_src = sample_source(cfg.source, cfg.dt, cfg.n_steps)

    cache = {}

    def measure(designs):
        todo = {}
        for d in designs:
            if d.key() not in cache:
                todo.setdefault(d.key(), d)
        if todo:
            nets = [_feed_net(cfg, genes, d, N) for d in todo.values()]
            results = solve_many(nets, cfg.dt, cfg.n_steps, cfg.newton, resp, threads)
            for k, r in zip(todo, results):
                cache[k] = None if r is None else _port_phasors(r, N, v_src, f0)
        return [cache[d.key()] for d in designs]

    with _labelled("baseline solve"):
        base_meas = measure([base])[0]
    if base_meas is None:
        raise ConfigError("baseline feed circuits do not converge")
    mag_b, ph_b = base_meas

    def realize(meas):
        mag, ph = meas
        return taper * (mag / mag_b) * np.exp(-1j * (ph - ph_b))

    x = synthesize_received(scen, n_array)
    rows, seeds = [], [base]
    improvements = []
    t_ga = 0.0
    n_windows = n_array // dwell
    for w in range(n_windows):
        sl = slice(w * dwell, (w + 1) * dwell)
        phi_tot = estimate_covariance(x.total[sl])
        phi_u = estimate_covariance(x.undesired[sl])
        a2 = float(np.mean(np.abs(x.desired_amplitude[sl]) ** 2))

        def evaluate_batch(designs):
            out_ = []
            for m in measure(designs):
                if m is None:
                    out_.append(None)
                    continue
                try:
                    out_.append(-applebaum_modified_cost(realize(m), phi_tot, theta_d))
                except PortforgeError:
                    out_.append(None)
            return out_

        ga = replace(cfg.ga, seed=cfg.ga.seed + w)
        with _labelled(f"optimisation window {w}"):
            res, t = timed(ga_minimize, ga, genes.bounds, evaluate_batch=evaluate_batch, seeds=seeds)
        t_ga += t
        seen, seeds = set(), []
        for d in [base] + [p.design for p in res.population]:
            if d.key() not in seen:
                seen.add(d.key())
                seeds.append(d)
        cost_base = applebaum_modified_cost(taper, phi_tot, theta_d)
        cost_opt = -res.best[0].objectives[0]
        switched = cost_opt > (1.0 + margin) * cost_base
        w_opt = realize(measure([res.best[0].design])[0]) if switched else taper.astype(complex)
        s_base = sinr(taper, a2, theta_d, phi_u)
        s_opt = sinr(w_opt, a2, theta_d, phi_u)
        db = lambda s: 10 * math.log10(s) if s > 0 else -math.inf  # noqa: E731
        th_i = (math.degrees(scen.interferers[0].theta_at(w * dwell))
                if scen.interferers else math.nan)
        rows.append([w, w * dwell, th_i, db(s_base), db(s_opt), cost_base, cost_opt, int(switched)])
        improvements.append(db(s_opt) - db(s_base))
        report.metric(f"sinr_baseline_dB_w{w:02d}", db(s_base))
        report.metric(f"sinr_optimized_dB_w{w:02d}", db(s_opt))
    report.timing("optimisation", t_ga)
    report.artifact(write_table_csv(
        out / "sinr.csv",
        ["window", "start_step", "theta_i_deg", "sinr_baseline_dB", "sinr_optimized_dB",
         "cost_baseline", "cost_optimized", "switched"], rows))
    imp = np.array(improvements)
    report.metric("n_windows", n_windows)
    report.metric("min_improvement_dB", imp.min())
    report.metric("max_improvement_dB", imp.max())
    report.metric("windows_switched", sum(r[-1] for r in rows))
    report.metric("circuit_designs_solved", len(cache))

    timing = cfg.section("timing")
    if timing.get("enabled", True):
        net = _feed_net(cfg, genes, base, N)
        with _labelled("timing: port-extracted solve"):
            pe, t_pe = timed(solve_transient, net, cfg.dt, cfg.n_steps, cfg.newton, resp)
        with _labelled("timing: self-consistent solve"):
            sc, t_sc = timed(solve_self_consistent, sys, net, cfg.dt, cfg.n_steps, cfg.newton,
                             timing.get("solver", "cg"))
        report.timing("port_extracted_solve", t_pe)
        report.timing("self_consistent_solve", t_sc)
        el = port_element(net, 0)
        report.metric("timing_relative_l2_difference",
                      relative_l2_difference(pe.element_voltage(el.name), sc.element_voltage(el.name)))
        report.metric("surrogate_dof", sys.dof)
    return _finish(report, out, t0)


def _port_phasors(result, N, v_src, f0):
    mags, phases = np.zeros(N), np.zeros(N)
    for m in range(N):
        v = result.element_voltage(port_element(result.netlist, m).name)
        mags[m] = abs(phasor_at(v, f0))
        phases[m] = phase_from_delay(v_src, v, f0)
    return mags, phases


RUNNERS = {
    "validation": run_validation,
    "reflection_multiobjective": run_reflection_multiobjective,
    "nonlinear_filter": run_nonlinear_filter,
    "adaptive_sinr": run_adaptive_sinr,
}


def run_scenario(cfg: ScenarioConfig, out_dir=None, threads: int = 1) -> RunReport:
    fn = RUNNERS[cfg.kind]
    if cfg.kind == "validation":
        return fn(cfg, out_dir)
    return fn(cfg, out_dir, threads=threads)
