"""Smoke test for the Python bindings.

Build and install first:
    pip install --no-build-isolation ./crates/python
"""

import math
import os
import random

import stripelight as sl

HERE = os.path.dirname(os.path.abspath(__file__))
MODEL = os.path.join(HERE, "..", "crates", "core", "assets", "reference_model.json")


def main():
    t = sl.CameraTimings(rows=16, cols=16)
    n = t.signal_length()
    assert n == 16 + 5, n

    rng = random.Random(0)
    base = [rng.uniform(0.2, 0.8) for _ in range(16 * 16 * 3)]
    scene = sl.Scene.synthesize(base, 16, 16)

    dark = sl.render(scene, sl.LightSignal.constant(t, 0.0), t)
    assert max(abs(a - b) for a, b in zip(dark, scene.ambient)) < 1e-12

    signal = sl.LightSignal(t, [rng.random() for _ in range(3 * n)])
    img = sl.render(scene, signal, t, delta=3)
    assert len(img) == 16 * 16 * 3 and all(0.0 <= p <= 1.0 for p in img)

    model = sl.Model.reference(16, 16, seed=1)
    probs = model.predict(img, 16, 16)
    assert len(probs) == len(sl.LABELS) and math.isclose(sum(probs), 1.0, abs_tol=1e-9)

    result = sl.optimize(scene, model, t, target=2, seed=4, max_iterations=5)
    assert result.iterations_used == 5 and len(result.loss_trace) == 5
    rate, conf, total = sl.evaluate(result.signal, scene, model, t, target=2, n_transforms=2, seed=1)
    assert total == 2 * n and 0.0 <= rate <= 1.0

    sched = sl.compile_pwm(result.signal)
    duties = sched.simulate()
    worst = max(abs(a - b) for a, b in zip(duties, result.signal.values))
    assert worst <= 4 / 240 + 1 / 120, worst
    assert sl.PwmSchedule.from_firmware(sched.to_firmware()) == sched

    again = sl.LightSignal.from_json(result.signal.to_json())
    assert again.values == result.signal.values

    try:
        sl.CameraTimings(exposure_us=10.0)
    except ValueError:
        pass
    else:
        raise AssertionError("short exposure accepted")

    if os.path.exists(MODEL):
        ref = sl.Model.load(MODEL)
        ring = sl.Scene.exemplar(sl.LABELS.index("ring"))
        cam = sl.CameraTimings()
        steady = sl.LightSignal.constant(cam, 1.0)
        p = ref.predict(sl.render(ring, steady, cam), 64, 64)
        assert max(range(len(p)), key=p.__getitem__) == sl.LABELS.index("ring")

    print("stripelight", sl.__version__, "python smoke test ok")


if __name__ == "__main__":
    main()
