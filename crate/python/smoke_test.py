#!/usr/bin/env python3
"""Smoke test for the `nvlab` Python extension module.

Build the module first, then run this script from anywhere:

    cargo build --release -p nvlab-py
    python3 python/smoke_test.py

The script stages the compiled shared library under the importable name
`nvlab`, imports it, and exercises every exposed operation with loose
physical sanity checks (exact values are pinned by the Rust test suite;
this script only proves the binding surface works end to end).
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent

_checks = 0


def check(name: str, ok: bool, detail: str = "") -> None:
    global _checks
    _checks += 1
    if not ok:
        print(f"smoke {name}: FAIL {detail}")
        sys.exit(1)
    print(f"smoke {name}: ok")


def stage_module() -> None:
    """Copy the freshest built cdylib next to a temp dir as nvlab.so."""
    candidates = [
        REPO / "target" / profile / "libnvlab.so"
        for profile in ("release", "debug")
    ]
    built = [p for p in candidates if p.exists()]
    if not built:
        print(
            "smoke: no compiled module found; run "
            "`cargo build --release -p nvlab-py` first",
            file=sys.stderr,
        )
        sys.exit(1)
    newest = max(built, key=lambda p: p.stat().st_mtime)
    stage = Path(tempfile.mkdtemp(prefix="nvlab-py-"))
    shutil.copy2(newest, stage / "nvlab.so")
    sys.path.insert(0, str(stage))


def main() -> None:
    stage_module()
    import nvlab

    # Constants and unit conversions.
    c = nvlab.constants()
    check(
        "constants",
        c["d_gs"] == 2.87e9 and c["gamma_nv"] == nvlab.gyromagnetic_ratio(),
    )
    b = nvlab.field_from_shift(c["gamma_nv"])
    check("field_from_shift", abs(b - 1.0) < 1e-12, f"got {b}")

    # Linewidth model: the default operating point is a known value, and
    # the width must grow monotonically with drive power.
    lw_op = nvlab.power_broadened_linewidth(58e-6)
    check(
        "linewidth_model",
        abs(lw_op - 91048.0007182) < 1e-3,
        f"got {lw_op}",
    )
    widths = [nvlab.power_broadened_linewidth(p) for p in (0.0, 1e-5, 1e-4, 1e-3)]
    check("linewidth_monotonic", all(a < b for a, b in zip(widths, widths[1:])))
    check("pumping_rate", abs(nvlab.pumping_rate() - 31785.702) < 1e-2)

    # Resonance comb: 24 sorted lines, symmetric around the zero-field
    # splitting for a pure bias field at default temperature.
    lines = nvlab.resonance_lines((0.0, 0.0, 5e-4))
    centers = [l.center for l in lines]
    check(
        "resonance_lines",
        len(lines) == 24
        and centers == sorted(centers)
        and abs((centers[0] + centers[-1]) / 2 - c["d_gs"]) < 1.0,
    )
    mid = sum(centers) / len(centers)
    check("comb_mean", abs(mid - c["d_gs"]) < 1.0, f"got {mid}")

    # Lorentzian helper.
    peak = nvlab.lorentzian_peak(0.0, 0.0, 1.0, 2.0)
    half = nvlab.lorentzian_peak(0.5, 0.0, 1.0, 2.0)
    check("lorentzian_peak", peak == 2.0 and abs(half - 1.0) < 1e-12)

    # Noiseless sweep through the full chain, then the dip fit. The
    # modulated line reads out broader than the underlying model width.
    sp = nvlab.odmr_spectrum(span=500e3, n_points=201, t_int=1e-3)
    check("odmr_spectrum", len(sp) == 201 and len(sp.freq) == len(sp.s_integ))
    fit = nvlab.fit_lorentzian(sp.freq, sp.s_integ)
    check(
        "fit_center_on_grid",
        sp.freq[0] < fit.center < sp.freq[-1],
        f"center {fit.center} outside grid",
    )
    check(
        "fit_linewidth",
        1.05 * lw_op < fit.linewidth < 1.6 * lw_op,
        f"got {fit.linewidth} vs model {lw_op}",
    )
    check("fit_amplitude_sign", fit.amplitude < 0.0 and fit.contrast > 0.0)

    # Seeded noise must be reproducible and change with the seed.
    a = nvlab.odmr_spectrum(span=200e3, n_points=41, t_int=1e-3, shot_noise=True, seed=7)
    b2 = nvlab.odmr_spectrum(span=200e3, n_points=41, t_int=1e-3, shot_noise=True, seed=7)
    c2 = nvlab.odmr_spectrum(span=200e3, n_points=41, t_int=1e-3, shot_noise=True, seed=8)
    check(
        "seeded_noise",
        a.s_integ == b2.s_integ and a.s_integ != c2.s_integ,
    )

    # Sensitivity conversions.
    eta = nvlab.sensitivity(2e-6, 1e-9, 1e-3, 28e9)
    manual = 2e-6 / (28e9 * 1e-9) * math.sqrt(1e-3)
    check("sensitivity", abs(eta - manual) < 1e-18, f"{eta} vs {manual}")
    hist = nvlab.histogram_sensitivity([0.0, 1e-6, -1e-6, 2e-6, -2e-6] * 10, 1e-3, 1e-9)
    check("histogram_sensitivity", hist["eta_b"] > 0.0 and hist["sigma"] > 0.0)

    # Shot-noise limit against its closed form.
    rate = nvlab.photon_rate(0.40e-3, 10.0)
    check("photon_rate", abs(rate - 2.4966e14) < 1e11, f"got {rate}")
    eta_shot = nvlab.shot_noise_limit(92.19e3, 0.0062, rate)
    manual = c["p_f"] / c["gamma_nv"] * (92.19e3 / 0.0062) / math.sqrt(rate)
    check("shot_noise_limit", abs(eta_shot - manual) < 1e-18, f"got {eta_shot}")

    # Allan deviation conventions on an alternating series.
    alt = [1.0 if i % 2 == 0 else -1.0 for i in range(64)]
    raw = nvlab.allan_deviation(alt, 1e-3, [1e-3], half_factor=False)
    conv = nvlab.allan_deviation(alt, 1e-3, [1e-3])
    check(
        "allan_deviation",
        raw.sigma_a == [2.0]
        and abs(conv.sigma_a[0] - 2.0 / math.sqrt(2.0)) < 1e-15
        and conv.half_factor,
    )
    rej = nvlab.allan_deviation(alt, 1e-3, [1e-3, 1.0])
    check("allan_rejects_long_tau", rej.rejected_taus == [1.0])

    # Resonator model: dip depth and bandwidth of the default resonator,
    # and a round-trip through the fit.
    bw = nvlab.resonator_bandwidth()
    check("resonator_bandwidth", abs(bw - 32.26e6) < 0.1e6, f"got {bw}")
    freq = [2.87e9 + (i - 100) * 4e5 for i in range(201)]
    s11 = [nvlab.reflection_s11(f, q0=110.0, beta_c=0.35, f_res=2.87e9) for f in freq]
    model = nvlab.fit_resonator(freq, s11)
    check(
        "fit_resonator",
        abs(model["q0"] - 110.0) < 1.0 and abs(model["beta_c"] - 0.35) < 0.01,
        f"got {model}",
    )

    # Closed-loop tracker on the elevator scenario: noiseless run must
    # keep lock, move the carrier, and report fields consistent with the
    # carrier motion.
    log = nvlab.track_elevator(t_int_per_iter=2e-3)
    check("track_runs", len(log) > 1000 and not any(log.lock_lost))
    quantum_b = nvlab.field_from_shift(log.step_quantum)
    worst = max(
        abs(d - t) for d, t in zip(log.delta_b, log.true_delta_b)
    )
    check("track_follows", worst < 3 * quantum_b, f"worst error {worst}")
    check("track_phases", log.phase[0] == "ground" and len(set(log.phase)) >= 5)

    # File-based experiment runner from inline TOML.
    out = tempfile.mkdtemp(prefix="nvlab-run-")
    res = nvlab.run_toml(
        """
        experiment = "limits"

        [limits]
        linewidth = 92.19e3
        contrast = 0.0062
        u_shunt = 0.40e-3
        r_shunt = 10.0
        """,
        out=out,
        seed=42,
    )
    check(
        "run_toml",
        res.seed == 42
        and abs(res.metrics["eta_shot[T/sqrtHz]"] - eta_shot) < 1e-18
        and (Path(out) / "report.json").exists()
        and "limits run" in res.summary,
    )

    # The same entry point, from a config file on disk, including a
    # dotted override.
    res2 = nvlab.run(
        str(REPO / "configs" / "limits.toml"),
        out=tempfile.mkdtemp(prefix="nvlab-run-"),
        overrides=["limits.contrast=0.0124"],
    )
    check(
        "run_overrides",
        abs(res2.metrics["eta_shot[T/sqrtHz]"] - eta_shot / 2) < 1e-15,
        f"got {res2.metrics['eta_shot[T/sqrtHz]']}",
    )

    # Errors surface as Python exceptions.
    try:
        nvlab.shot_noise_limit(-1.0, 0.01, 1e14)
        check("error_mapping", False, "negative linewidth accepted")
    except ValueError:
        check("error_mapping", True)

    print(f"smoke: all {_checks} checks passed")


if __name__ == "__main__":
    main()
