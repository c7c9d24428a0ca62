"""Scenario files and the pipelines they drive.

A scenario is an INI file (``[section]`` headers, ``key = value`` lines):

    [scenario]   pipeline, tol, seed
    [model]      name, n, resolution, extents, periodic, faces_m, profile, scale
    [exhaustion] level0, level1, ...   region predicates on cell centroids
    [pipeline]   pipeline-specific keys (see ``PIPELINES``)
    [sweep]      key, values, metric   (only for the sweep command)

Region predicates join terms with ``&``: ``a < x0 < b``, ``x2 > a``,
``|x0| < b`` or ``all``.  Cutoffs are products of ``bump xk center radius
[power]`` factors joined with ``*``.
"""
from __future__ import annotations

import configparser
import re
import time
from dataclasses import dataclass, field

import numpy as np

from . import catalog
from .assembly import assemble
from .catalog import ModelSpace
from .deform import deform_mean_convex, deform_positive_scalar, increase_mean_pipeline
from .eigen import lambda1_dirichlet, mu1, sigma1
from .mesh import build_exhaustion
from .prescribe import bound_check, completeness_check, exhaustion_solve, verify_prescription

DEFAULT_SEED = 424243
PIPELINES = ("eigen", "deform_positive_scalar", "deform_mean_convex", "increase_mean", "prescribe")
FAMILY = {
    "eigen": ("eigen",),
    "deform": ("deform_positive_scalar", "deform_mean_convex", "increase_mean"),
    "prescribe": ("prescribe",),
}


class ScenarioError(ValueError):
    """Parse or validation failure; the message names the offending field."""


# ---------------------------------------------------------------------------
# small grammars

_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_TERMS = [
    (re.compile(rf"^({_NUM})\s*<\s*x(\d+)\s*<\s*({_NUM})$"), lambda m: (int(m[2]), float(m[1]), float(m[3]), False)),
    (re.compile(rf"^x(\d+)\s*<\s*({_NUM})$"), lambda m: (int(m[1]), -np.inf, float(m[2]), False)),
    (re.compile(rf"^x(\d+)\s*>\s*({_NUM})$"), lambda m: (int(m[1]), float(m[2]), np.inf, False)),
    (re.compile(rf"^\|x(\d+)\|\s*<\s*({_NUM})$"), lambda m: (int(m[1]), -np.inf, float(m[2]), True)),
]


def parse_region(text: str, n: int, where: str = "region"):
    """Predicate on an (N, n) array of points."""
    text = text.strip()
    if text == "all":
        return lambda c: np.ones(len(c), dtype=bool)
    terms = []
    for part in text.split("&"):
        part = part.strip()
        for pat, build in _TERMS:
            m = pat.match(part)
            if m:
                axis, lo, hi, absolute = build(m)
                if axis >= n:
                    raise ScenarioError(f"{where}: axis x{axis} out of range for n={n}")
                terms.append((axis, lo, hi, absolute))
                break
        else:
            raise ScenarioError(f"{where}: cannot parse term {part!r}")

    def predicate(c):
        ok = np.ones(len(c), dtype=bool)
        for axis, lo, hi, absolute in terms:
            v = np.abs(c[:, axis]) if absolute else c[:, axis]
            ok &= (v > lo) & (v < hi)
        return ok

    return predicate


def parse_cutoff(text: str, n: int, where: str = "chi"):
    """Product of polynomial bumps (1 - ((x - c)/r)^2)_+^k evaluated at points."""
    factors = []
    for part in text.split("*"):
        tok = part.split()
        if len(tok) not in (4, 5) or tok[0] != "bump" or not re.fullmatch(r"x\d+", tok[1]):
            raise ScenarioError(f"{where}: expected 'bump xk center radius [power]', got {part.strip()!r}")
        axis = int(tok[1][1:])
        if axis >= n:
            raise ScenarioError(f"{where}: axis x{axis} out of range for n={n}")
        try:
            c, r = float(tok[2]), float(tok[3])
            k = float(tok[4]) if len(tok) == 5 else 4.0
        except ValueError:
            raise ScenarioError(f"{where}: non-numeric bump parameter in {part.strip()!r}") from None
        if r <= 0:
            raise ScenarioError(f"{where}: bump radius must be positive")
        factors.append((axis, c, r, k))

    def cutoff(x):
        out = np.ones(len(x))
        for axis, c, r, k in factors:
            out *= np.clip(1 - ((x[:, axis] - c) / r) ** 2, 0, None) ** k
        return out

    return cutoff


def _floats(text, where):
    try:
        return [float(t) for t in text.split()]
    except ValueError:
        raise ScenarioError(f"{where}: expected numbers, got {text!r}") from None


def _bool(text, where):
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ScenarioError(f"{where}: expected a boolean, got {text!r}")


# ---------------------------------------------------------------------------
# scenario

@dataclass
class Scenario:
    pipeline: str
    model: dict
    levels: list  # region strings
    params: dict  # raw [pipeline] section
    tol: float = 1e-10
    seed: int = DEFAULT_SEED
    sweep: dict = field(default_factory=dict)
    source: str = ""

    def echo(self) -> dict:
        out = {"pipeline": self.pipeline, "tol": self.tol, "seed": self.seed}
        out.update({f"model.{k}": v for k, v in self.model.items()})
        out.update({f"exhaustion.level{i}": v for i, v in enumerate(self.levels)})
        out.update({f"pipeline.{k}": v for k, v in self.params.items()})
        return out

    def with_value(self, key: str, value: str) -> "Scenario":
        """Copy with one ``section.key`` replaced (used by sweeps)."""
        section, _, name = key.partition(".")
        model, params = dict(self.model), dict(self.params)
        levels = list(self.levels)
        tol = self.tol
        if section == "model":
            model[name] = value
        elif section == "pipeline":
            params[name] = value
        elif section == "exhaustion" and name.startswith("level"):
            levels[int(name[5:])] = value
        elif key == "scenario.tol":
            tol = float(value)
        else:
            raise ScenarioError(f"sweep: cannot vary {key!r}")
        out = Scenario(self.pipeline, model, levels, params, tol, self.seed, self.sweep, self.source)
        validate(out)
        return out


def parse_scenario(text: str, source: str = "<string>") -> Scenario:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ScenarioError(f"{source}: {exc}") from None
    if not cp.has_section("scenario"):
        raise ScenarioError(f"{source}: missing section [scenario]")
    if not cp.has_option("scenario", "pipeline"):
        raise ScenarioError(f"{source}: missing field scenario.pipeline")
    if not cp.has_section("model") or not cp.has_option("model", "name"):
        raise ScenarioError(f"{source}: missing field model.name")
    sc = cp["scenario"]
    try:
        tol = float(sc.get("tol", "1e-10"))
        seed = int(sc.get("seed", str(DEFAULT_SEED)))
    except ValueError as exc:
        raise ScenarioError(f"{source}: scenario.tol/seed: {exc}") from None
    levels = []
    if cp.has_section("exhaustion"):
        ex = cp["exhaustion"]
        keys = sorted((k for k in ex if re.fullmatch(r"level\d+", k)), key=lambda k: int(k[5:]))
        if [int(k[5:]) for k in keys] != list(range(len(keys))):
            raise ScenarioError(f"{source}: exhaustion levels must be level0, level1, ... without gaps")
        levels = [ex[k] for k in keys]
    out = Scenario(
        pipeline=sc["pipeline"].strip(),
        model=dict(cp["model"]),
        levels=levels,
        params=dict(cp["pipeline"]) if cp.has_section("pipeline") else {},
        tol=tol,
        seed=seed,
        sweep=dict(cp["sweep"]) if cp.has_section("sweep") else {},
        source=source,
    )
    validate(out)
    return out


def load_scenario(path) -> Scenario:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from None
    return parse_scenario(text, str(path))


def validate(s: Scenario) -> None:
    if s.pipeline not in PIPELINES:
        raise ScenarioError(f"scenario.pipeline: unknown pipeline {s.pipeline!r}; choose from {PIPELINES}")
    if not s.tol > 0:
        raise ScenarioError("scenario.tol must be positive")
    if s.model.get("name") not in catalog.CATALOG:
        raise ScenarioError(f"model.name: unknown model {s.model.get('name')!r}")
    n = model_dim(s)
    res = s.model.get("resolution")
    if res is not None:
        vals = _floats(res, "model.resolution")
        if len(vals) != n or any(v <= 0 or v != int(v) for v in vals):
            raise ScenarioError(f"model.resolution: need {n} positive integers")
    for i, lev in enumerate(s.levels):
        parse_region(lev, n, f"exhaustion.level{i}")
    if s.pipeline != "eigen" and not s.levels:
        raise ScenarioError("exhaustion: at least one level is required")
    if s.pipeline in FAMILY["deform"] and "chi" not in s.params:
        raise ScenarioError("pipeline.chi is required")
    if "chi" in s.params:
        parse_cutoff(s.params["chi"], n, "pipeline.chi")
    if s.pipeline == "prescribe":
        for key in ("f", "X"):
            if key not in s.params:
                raise ScenarioError(f"pipeline.{key} is required")
        parse_region(s.params["X"], n, "pipeline.X")


def model_dim(s: Scenario) -> int:
    try:
        return int(s.model.get("n", "3"))
    except ValueError:
        raise ScenarioError("model.n: expected an integer") from None


def _profile(text: str, n: int):
    tok = text.split()
    kind, args = tok[0], _floats(" ".join(tok[1:]), "model.profile")
    try:
        if kind == "power":
            return catalog.power_profile(*args)
        if kind == "exponential":
            return catalog.exponential_profile(*args)
        if kind == "scalar_flat":
            return catalog.scalar_flat_profile(n, *args)
    except TypeError:
        raise ScenarioError(f"model.profile: wrong number of arguments for {kind!r}") from None
    raise ScenarioError(f"model.profile: unknown profile {kind!r}")


def build_model(s: Scenario) -> ModelSpace:
    m = s.model
    n = model_dim(s)
    kw = {}
    if "resolution" in m:
        kw["resolution"] = [int(v) for v in _floats(m["resolution"], "model.resolution")]
    if "extents" in m:
        ext = [_floats(p, "model.extents") for p in m["extents"].split(";")]
        if len(ext) != n or any(len(e) != 2 for e in ext):
            raise ScenarioError(f"model.extents: need {n} 'lo hi' pairs separated by ';'")
        kw["extents"] = [tuple(e) for e in ext]
    if "periodic" in m:
        per = [_bool(p, "model.periodic") for p in m["periodic"].split()]
        if len(per) != n:
            raise ScenarioError(f"model.periodic: need {n} flags")
        kw["periodic"] = per
    if "faces_m" in m:
        faces = []
        for tok in m["faces_m"].split():
            axis, _, side = tok.partition(":")
            if side not in ("lo", "hi") or not axis.isdigit():
                raise ScenarioError(f"model.faces_m: expected 'axis:lo|hi', got {tok!r}")
            faces.append((int(axis), side))
        kw["faces_m"] = faces
    if "profile" in m:
        kw["profile"] = _profile(m["profile"], n)
    try:
        model = catalog.model_space(m["name"], n=n, **kw)
    except (ValueError, TypeError) as exc:
        raise ScenarioError(f"model: {exc}") from None
    if "scale" in m:
        model = catalog.scaled_model(model, float(m["scale"]))
    return model


# ---------------------------------------------------------------------------
# reports

@dataclass
class RunReport:
    scenario: dict
    records: list = field(default_factory=list)
    verdicts: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)  # name -> list of row dicts

    @property
    def passed(self) -> bool:
        return bool(self.verdicts) and all(self.verdicts.values())

    def verdict(self, name: str, ok) -> None:
        self.verdicts[name] = bool(ok)

    def lines(self) -> list[dict]:
        out = [dict(kind="scenario", **self.scenario)]
        out += [dict(kind="step", **r) for r in self.records]
        out += [{"kind": "verdict", "name": k, "pass": v} for k, v in self.verdicts.items()]
        out += [{"kind": "timing", "name": k, "seconds": v} for k, v in self.timings.items()]
        out.append({"kind": "summary", "pass": self.passed, "n_verdicts": len(self.verdicts)})
        return out


def _field(model: ModelSpace, text: str, where: str):
    t = text.strip()
    if t == "R":
        return model.geometry.R
    if t == "H":
        return np.nan_to_num(model.geometry.H)
    try:
        return float(t)
    except ValueError:
        raise ScenarioError(f"{where}: expected a number, 'R' or 'H'") from None


def _run_eigen(s, model, rep):
    p = s.params
    problem = p.get("problem", "sigma1")
    f = _field(model, p.get("f", "0"), "pipeline.f")
    h = _field(model, p.get("h", "0"), "pipeline.h")
    lumped = _bool(p.get("lumped", "false"), "pipeline.lumped")
    mesh = model.mesh
    if s.levels:
        mesh = build_exhaustion(model.mesh, [parse_region(lv, model.dim) for lv in s.levels]).domains[-1]
        f = mesh.restrict(f) if np.ndim(f) else f
        h = mesh.restrict(h) if np.ndim(h) else h
    forms = assemble(mesh, model.metric.restrict(mesh), f, h, lumped=lumped)
    if problem == "sigma1":
        res = sigma1(forms)
    elif problem == "mu1":
        res = mu1(forms)
    elif problem == "lambda1_dirichlet":
        res = lambda1_dirichlet(forms, _field(model, p.get("q", "0"), "pipeline.q"))
    else:
        raise ScenarioError(f"pipeline.problem: unknown problem {problem!r}")
    rep.records.append(res.record())
    rep.verdict("first_eigenpair", np.isfinite(res.value))
    if "expect" in p:
        expect = float(p["expect"])
        tol = float(p.get("expect_tol", "1e-3"))
        rep.records.append({"expected": expect, "error": abs(res.value - expect)})
        rep.verdict("eigen_anchor", abs(res.value - expect) <= tol)


def _levels(s, model):
    return [parse_region(lv, model.dim) for lv in s.levels]


def _run_deform(s, model, rep):
    p = s.params
    chi = parse_cutoff(p["chi"], model.dim)(model.mesh.vertices)
    kw = dict(t0=float(p.get("t0", "0.1")), budget=int(p.get("budget", "12")))
    if s.pipeline == "increase_mean":
        sched = _floats(p["eps_schedule"], "pipeline.eps_schedule") if "eps_schedule" in p else None
        steps, report = increase_mean_pipeline(
            model, chi, _levels(s, model), eps_schedule=sched,
            proceed=_bool(p.get("proceed", "true"), "pipeline.proceed"),
            coefficient=p.get("coefficient", "corrected"), **kw)
        for st in steps:
            rep.records.append({"eps": st.eps, "variation": st.value, "interior_term": st.interior_term,
                                "boundary_term": st.boundary_term})
        rep.verdict("positive_variation_found", steps[-1].value > 0)
    else:
        fn = deform_positive_scalar if s.pipeline == "deform_positive_scalar" else deform_mean_convex
        report = fn(model, chi, _levels(s, model),
                    normalize_volume=_bool(p.get("normalize_volume", "true"), "pipeline.normalize_volume"),
                    **kw)
    if report is not None:
        rep.records.append(report.record())
        rep.tables["line_search"] = [{"t": t, "eigenvalue": v} for t, v in report.trace]
        for k, v in report.certificates.items():
            rep.verdict(k, v)
        if "max_ratio" in p:
            rep.verdict("equivalence_ratio", report.bounds[1] / report.bounds[0] < float(p["max_ratio"]))


def _run_prescribe(s, model, rep):
    p = s.params
    f = _field(model, p["f"], "pipeline.f")
    h = _field(model, p.get("h", "0"), "pipeline.h")
    ex = build_exhaustion(model.mesh, _levels(s, model))
    X = np.flatnonzero(parse_region(p["X"], model.dim)(model.mesh.cell_centroids()))
    if X.size == 0:
        raise ScenarioError("pipeline.X selects no cells")
    sol = exhaustion_solve(ex, model.metric, f, h, model.geometry, X, case=p.get("case", "a"),
                           margin=float(p.get("margin", "0.01")), tol=s.tol, start=p.get("start", "lower"))
    rep.records += list(sol.rows())
    rep.tables["exhaustion"] = list(sol.rows())
    rep.tables["trace_last"] = list(sol.traces[-1].rows())
    rep.verdict("sandwich", all(tr.sandwich_violations == 0 for tr in sol.traces))
    rep.verdict("nonlinear_residual", all(tr.residual <= 10 * s.tol for tr in sol.traces))
    if len(sol.differences) >= 2:
        start = int(p.get("decreasing_from", "1"))
        k0 = sol.decreasing_from
        rep.verdict("differences_decreasing", k0 is not None and k0 <= start)
    if "final_difference" in p and sol.differences:
        rep.verdict("final_difference", sol.differences[-1] <= float(p["final_difference"]))
    if "expect_limit" in p:
        err = float(np.abs(sol.limit - float(p["expect_limit"])).max())
        rep.records.append({"limit_error": err})
        rep.verdict("anchored_limit", err <= float(p.get("expect_tol", "1e-3")))
    bc = bound_check(sol)
    rep.verdict("bounded_on_X", not any(bc["alarm"]) and all(bc["within_upper"]))
    dom = sol.domains[-1]
    gd = model.geometry.restrict(dom)
    forms = assemble(dom, model.metric.restrict(dom), 0.0, 0.0, lumped=True)
    fd = dom.restrict(f) if np.ndim(f) else f
    hd = dom.restrict(h) if np.ndim(h) else h
    res = verify_prescription(sol.solutions[-1], fd, hd, gd, forms, laplacian="weak",
                              cap_cells=int(p.get("cap_cells", "2")))
    rep.records.append({"residual_R": res.interior, "residual_H": res.boundary,
                        "boundary_hypothesis_flags": res.boundary_hypothesis_flags})
    scale = max(1.0, float(np.max(np.abs(fd))))
    rep.verdict("residual_R", res.interior <= float(p.get("residual_tol", "1e-6")) * scale)
    cr = completeness_check(dom, model.metric.restrict(dom), dom.to_vertices(sol.solutions[-1]),
                            c2=sol.bounds[-1].u_minus, seed=s.seed)
    rep.records.append({"min_path_ratio": cr.min_ratio, "path_ratio_bound": cr.lower_bound})
    rep.verdict("completeness_proxy", cr.ok)


def run_scenario(s: Scenario) -> RunReport:
    """Run one scenario; numerical failures propagate as exceptions."""
    rep = RunReport(s.echo())
    t0 = time.perf_counter()
    model = build_model(s)
    rep.timings["model"] = time.perf_counter() - t0
    t1 = time.perf_counter()
    if s.pipeline == "eigen":
        _run_eigen(s, model, rep)
    elif s.pipeline == "prescribe":
        _run_prescribe(s, model, rep)
    else:
        _run_deform(s, model, rep)
    rep.timings["pipeline"] = time.perf_counter() - t1
    return rep
