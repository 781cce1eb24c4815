"""Smoke test for the sagrnn_py extension module.

Build and install first:
    pip install maturin
    maturin build --release -m crates/python/Cargo.toml
    pip install target/wheels/sagrnn_py-*.whl
"""
import os
import random
import tempfile

import sagrnn_py as s


def main():
    assert s.SAMPLE_RATE == 8000
    assert abs(s.model_ild_db(90.0) - 10.0) < 1e-12
    assert s.woodworth_itd_us(45.0) > 0

    scenes = s.synthesize({"duration_s": 0.25, "train": 2, "seed": 1}, split="train")
    print(f"synthesized {len(scenes)} scenes at {scenes[0]['azimuths_deg']} deg")

    trainer = s.Trainer({"batch_size": 2, "seed": 0})
    for _ in range(3):
        rec = trainer.step(scenes)
    print(f"step {rec['step']}: loss {rec['loss']:.3f}")

    model = trainer.model()
    est = model.separate(scenes[0]["left"], scenes[0]["right"])
    ref = scenes[0]["reference"]
    mix = (scenes[0]["left"], scenes[0]["right"])
    perms, _ = s.pit_assign(est, ref)
    for r, e in enumerate(perms[0]):
        g = s.separation_gain(tuple(est[e]), tuple(ref[r]), mix)
        print(f"speaker {r}: dSNR {g['delta_snr_db']:+.2f} dB")

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.ckpt")
        model.save(path)
        assert s.Model.load(path).separate(*mix) == est

    rng = random.Random(0)
    noise = [rng.gauss(0.0, 0.1) for _ in range(8000)]
    left, right = s.spatialize(noise, 30.0)
    cues = s.CueAnalyzer().cues(left, right)
    print(f"noise at 30 deg: ITD {cues['itd_us']:.0f} us (model {s.woodworth_itd_us(30.0):.0f} us)")
    print("ok")


if __name__ == "__main__":
    main()
