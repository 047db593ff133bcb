"""Command-line front end: generate, sweep, ablate, verify-inversion, eval.

Exit codes: 0 success, 2 bad input (missing file, invalid value), 3 pipeline
failure, 4 inversion error above tolerance.
"""
from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import tomli

from . import fixtures
from .backends import load_backends
from .errors import SketchError
from .imageio import contact_sheet, load_image, save_png
from .inversion import SamplerSchedule, ddpm_invert, replay_reconstruct
from .metrics import DEFAULT_SCORERS, SCORERS, score_pairs
from .pipeline import PRESETS, PipelineConfig, ablate, generate_sketch

log = logging.getLogger("refsketch")

EXIT_OK, EXIT_INPUT, EXIT_PIPELINE, EXIT_INVERSION = 0, 2, 3, 4
INVERSION_TOLERANCE = 1e-4
FIXTURE_PREFIX = "fixture:"
ABLATION_VARIANTS = (("A", ()), ("-DAM", ("DAM",)), ("-SPM", ("SPM",)), ("-SDPE", ("SDPE",)))
CONFIG_FIELDS = {f.name for f in dataclasses.fields(PipelineConfig)}
# flag name -> config field
FLAG_FIELDS = {
    "alpha": "alpha", "gamma": "gamma", "zeta": "zeta", "beta_sg": "beta_sg",
    "beta_text": "beta_text", "lambda_sem": "lambda_sem", "tau": "tau",
    "k_clusters": "k_clusters", "seed": "seed", "steps": "total_steps",
    "skip": "skip_steps", "backend": "backend",
}


class InputError(Exception):
    """Bad user input; maps to exit code 2."""


# -- manifests ----------------------------------------------------------------

def _check_path(source: str) -> str:
    if source.startswith(FIXTURE_PREFIX):
        name = source[len(FIXTURE_PREFIX):]
        if name not in fixtures.ALL_FIXTURES:
            raise InputError(f"unknown fixture {name!r}; choose from {sorted(fixtures.ALL_FIXTURES)}")
    elif not Path(source).is_file():
        raise InputError(f"file not found: {source}")
    return source


def read_image(source: str) -> np.ndarray:
    if source.startswith(FIXTURE_PREFIX):
        return fixtures.fixture(source[len(FIXTURE_PREFIX):])
    try:
        return load_image(source)
    except OSError as exc:
        raise InputError(f"cannot read image {source}: {exc}") from exc


def _parse_value(text: str) -> Any:
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


@dataclass
class RunManifest:
    pairs: List[Tuple[str, str]]
    config: PipelineConfig
    sweep: Dict[str, List[Any]] = field(default_factory=dict)
    output_dir: Path = Path("out")

    def __post_init__(self):
        for c, r in self.pairs:
            _check_path(c)
            _check_path(r)
        bad = set(self.sweep) - CONFIG_FIELDS
        if bad:
            raise InputError(f"sweep names unknown config fields: {sorted(bad)}")

    def cells(self) -> List[Tuple[Dict[str, Any], PipelineConfig]]:
        """Every grid cell with its config; all are validated before returning."""
        if not self.sweep:
            return [({}, self.config)]
        names = list(self.sweep)
        out = []
        for values in itertools.product(*(sorted(self.sweep[n]) for n in names)):
            assignment = dict(zip(names, values))
            try:
                out.append((assignment, self.config.replace(**assignment)))
            except (SketchError, TypeError) as exc:
                raise InputError(f"invalid sweep cell {assignment}: {exc}") from exc
        return out


def load_config_file(path: str) -> Dict[str, Any]:
    """Flat TOML of config fields (plus pairs/sweep/output_dir), or a result.json."""
    p = Path(path)
    if not p.is_file():
        raise InputError(f"file not found: {path}")
    try:
        if p.suffix == ".json":
            data = json.loads(p.read_text())
            out = dict(data.get("config", {}))
            if "content" in data and "reference" in data:
                out["pairs"] = [[data["content"], data["reference"]]]
            return out
        return tomli.loads(p.read_text())
    except (ValueError, tomli.TOMLDecodeError) as exc:
        raise InputError(f"cannot parse {path}: {exc}") from exc


def manifest_from_args(args) -> RunManifest:
    raw = load_config_file(args.config) if getattr(args, "config", None) else {}
    pairs = [tuple(p) for p in raw.pop("pairs", [])]
    sweep = {k: list(v) for k, v in raw.pop("sweep", {}).items()}
    out_dir = raw.pop("output_dir", None)
    base = PRESETS[args.preset] if getattr(args, "preset", None) else PipelineConfig()
    values = base.to_dict()
    unknown = set(raw) - CONFIG_FIELDS
    if unknown:
        raise InputError(f"unknown config keys: {sorted(unknown)}")
    values.update(raw)
    steps = getattr(args, "steps", None)
    try:
        if steps is not None and steps != values["total_steps"]:
            # a bare --steps keeps the schedule's proportions
            values = PipelineConfig.from_dict(values).with_steps(steps).to_dict()
        for flag, name in FLAG_FIELDS.items():
            v = getattr(args, flag, None)
            if v is not None:
                values[name] = v
        config = PipelineConfig.from_dict(values)
    except (SketchError, TypeError) as exc:
        raise InputError(f"invalid configuration: {exc}") from exc
    if getattr(args, "content", None) or getattr(args, "reference", None):
        if not (args.content and args.reference):
            raise InputError("--content and --reference must be given together")
        pairs = [(args.content, args.reference)]
    if not pairs:
        raise InputError("no input pairs: pass --content/--reference or a config with 'pairs'")
    for source in getattr(args, "sweep", None) or []:
        name, _, vals = source.partition("=")
        if not vals:
            raise InputError(f"sweep option must look like name=v1,v2: {source!r}")
        sweep[name.replace("-", "_")] = [_parse_value(v) for v in vals.split(",")]
    out = Path(args.out) if getattr(args, "out", None) else Path(out_dir or "out")
    return RunManifest(pairs=pairs, config=config, sweep=sweep, output_dir=out)


# -- runs ---------------------------------------------------------------------

def _pair_dir(manifest: RunManifest, index: int) -> Path:
    if len(manifest.pairs) == 1:
        return manifest.output_dir
    c, r = manifest.pairs[index]
    return manifest.output_dir / f"{index:02d}_{Path(c).stem}_{Path(r).stem}"


def _write_result(directory: Path, name: str, result, content: str, reference: str,
                  json_name: Optional[str] = None, save_mask: bool = False) -> Path:
    png = save_png(directory / f"{name}.png", result.image)
    mask = None
    if save_mask:
        mask = result.foreground_mask.save_pgm(directory / f"{name}_mask.pgm").name
    meta = result.metadata()
    meta.update(content=content, reference=reference, image=png.name, mask=mask,
                interventions=sum(result.counters["interventions"].values()),
                guided_steps=len(result.counters["guided_steps"]))
    (directory / (json_name or f"{name}.json")).write_text(json.dumps(meta, indent=2, sort_keys=True))
    return png


def run_single(manifest: RunManifest, save_mask: bool = False) -> List[Path]:
    written = []
    for i, (c, r) in enumerate(manifest.pairs):
        result = generate_sketch(read_image(c), read_image(r), manifest.config)
        d = _pair_dir(manifest, i)
        written.append(_write_result(d, "sketch", result, c, r, json_name="result.json",
                                     save_mask=save_mask))
    return written


def _cell_name(assignment: Mapping[str, Any]) -> str:
    return "_".join(f"{k}={v}" for k, v in assignment.items())


def run_sweep(manifest: RunManifest, jobs: int = 1) -> List[Path]:
    if not manifest.sweep:
        return run_single(manifest)
    cells = manifest.cells()  # raises before any generation

    def one(job):
        (c, r), (assignment, config) = job
        # each cell builds its own backends so no state is shared between cells
        return generate_sketch(read_image(c), read_image(r), config,
                               load_backends(config.backend, latent_size=config.latent_size))

    written = []
    for i, pair in enumerate(manifest.pairs):
        jobs_list = [(pair, cell) for cell in cells]
        with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
            results = list(pool.map(one, jobs_list))
        d = _pair_dir(manifest, i)
        labels = []
        for (assignment, _), result in zip(cells, results):
            name = f"sketch_{_cell_name(assignment)}"
            written.append(_write_result(d, name, result, *pair))
            labels.append(_cell_name(assignment))
        sheet = contact_sheet([res.image for res in results], labels)
        written.append(save_png(d / "contact_sheet.png", sheet))
    return written


def pairwise_report(images: Mapping[str, np.ndarray]) -> Dict[str, Any]:
    names = list(images)
    pairs = {}
    for a, b in itertools.combinations(names, 2):
        diff = np.abs(images[a].astype(np.float64) - images[b].astype(np.float64)).mean()
        pairs[f"{a} vs {b}"] = float(diff)
    return {"variants": names, "pairwise_mean_abs_diff": pairs,
            "mean": float(np.mean(list(pairs.values()))) if pairs else 0.0}


def run_ablation(manifest: RunManifest) -> List[Path]:
    written = []
    for i, (c, r) in enumerate(manifest.pairs):
        I_cnt, I_ref = read_image(c), read_image(r)
        d = _pair_dir(manifest, i)
        images = {}
        for label, disabled in ABLATION_VARIANTS:
            result = generate_sketch(I_cnt, I_ref, ablate(manifest.config, disabled))
            name = "A" if label == "A" else f"no_{label[1:]}"
            written.append(_write_result(d, name, result, c, r))
            images[label] = result.image
        report = pairwise_report(images)
        report["config_hash"] = manifest.config.config_hash()
        (d / "ablation_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        written.append(d / "ablation_report.json")
    return written


def verify_inversion(image: np.ndarray, config: PipelineConfig,
                     corrupt_step: Optional[int] = None) -> float:
    """Max-abs error of invert-then-replay on the encoded image."""
    backends = load_backends(config.backend, latent_size=config.latent_size)
    diff = backends.diffusion
    schedule = SamplerSchedule.create(config.total_steps)
    z0 = diff.encode(image)
    trace = ddpm_invert(z0, schedule, diff, "", config.seed)
    if corrupt_step is not None:
        if not 1 <= corrupt_step <= schedule.total_steps:
            raise InputError(f"--corrupt-step must lie in [1, {schedule.total_steps}]")
        noise = [np.array(n) for n in trace.per_step_noise]
        noise[corrupt_step - 1] = np.zeros_like(noise[corrupt_step - 1])
        trace = dataclasses.replace(trace, per_step_noise=tuple(noise))
    return float(np.max(np.abs(replay_reconstruct(trace, diff) - z0)))


def run_eval(manifest: RunManifest, scorers: Sequence[str]) -> Path:
    unknown = [s for s in scorers if s not in SCORERS]
    if unknown:
        raise InputError(f"unknown scorers {unknown}; available: {sorted(SCORERS)}")
    triples, labels = [], []
    for c, r in manifest.pairs:
        I_cnt, I_ref = read_image(c), read_image(r)
        result = generate_sketch(I_cnt, I_ref, manifest.config)
        triples.append((result.image, I_cnt, I_ref))
        labels.append(f"{c} | {r}")
    report = score_pairs(triples, scorers, labels)
    out = manifest.output_dir / "metrics.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    payload["config_hash"] = manifest.config.config_hash()
    out.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return out


# -- argument parsing ---------------------------------------------------------

def _add_common(p: argparse.ArgumentParser, inputs: bool = True):
    if inputs:
        p.add_argument("--content", help="content image path or fixture:<name>")
        p.add_argument("--reference", help="reference sketch path or fixture:<name>")
    p.add_argument("--config", help="TOML config (flat field names) or a previous result.json")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--out", help="output directory")
    for flag in ("alpha", "gamma", "zeta", "beta_sg", "beta_text", "lambda_sem", "tau"):
        p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, type=float)
    for flag in ("k_clusters", "seed", "steps", "skip"):
        p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, type=int)
    p.add_argument("--backend", choices=("toy", "sd-adapter"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refsketch", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render one sketch per input pair")
    _add_common(p)
    p.add_argument("--save-mask", action="store_true", help="also write the foreground mask as PGM")

    p = sub.add_parser("sweep", help="grid over config values with a contact sheet")
    _add_common(p)
    p.add_argument("--sweep", action="append", metavar="NAME=V1,V2",
                   help="swept field and its values; repeat for a grid")
    p.add_argument("--jobs", type=int, default=1, help="cells rendered in parallel")

    _add_common(sub.add_parser("ablate", help="full config and three single-module ablations"))

    p = sub.add_parser("verify-inversion", help="check invert-then-replay exactness")
    p.add_argument("--image", required=True, help="image path or fixture:<name>")
    _add_common(p, inputs=False)
    p.add_argument("--corrupt-step", type=int, help=argparse.SUPPRESS)

    p = sub.add_parser("eval", help="generate and score every pair")
    _add_common(p)
    p.add_argument("--scorers", default=",".join(DEFAULT_SCORERS))

    p = sub.add_parser("fixtures", help="export the bundled fixture images as PNG")
    p.add_argument("--out", default="fixtures")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "fixtures":
            for name in sorted(fixtures.ALL_FIXTURES):
                print(save_png(Path(args.out) / f"{name}.png", fixtures.fixture_uint8(name)))
            return EXIT_OK
        if args.command == "verify-inversion":
            _check_path(args.image)
            manifest_args = argparse.Namespace(**{**vars(args), "content": args.image,
                                                  "reference": args.image})
            config = manifest_from_args(manifest_args).config
            err = verify_inversion(read_image(args.image), config, args.corrupt_step)
            ok = err <= INVERSION_TOLERANCE
            print(f"max_abs_error={err:.3e} steps={config.total_steps} "
                  f"{'ok' if ok else 'FAILED'}")
            return EXIT_OK if ok else EXIT_INVERSION
        manifest = manifest_from_args(args)
        if args.command == "generate":
            written = run_single(manifest, args.save_mask)
        elif args.command == "sweep":
            written = run_sweep(manifest, args.jobs)
        elif args.command == "ablate":
            written = run_ablation(manifest)
        else:
            written = [run_eval(manifest, [s for s in args.scorers.split(",") if s])]
        for path in written:
            print(path)
        return EXIT_OK
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SketchError as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
