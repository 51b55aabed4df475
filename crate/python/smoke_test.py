"""Builds a tone corpus, trains two steps, synthesizes and scores the result.

Run after installing the extension, e.g.
    maturin build -m crates/python/Cargo.toml -o dist && pip install dist/*.whl
"""

import os
import tempfile

import reinforce_tts as rt


def main():
    with tempfile.TemporaryDirectory() as tmp:
        config = rt.make_demo(os.path.join(tmp, "demo"), steps=2, seed=7)
        ckpt = rt.train(config, workdir=tmp)
        assert ckpt.endswith("step_00000002"), ckpt

        synth = rt.Synthesizer(ckpt)
        assert synth.step == 2
        samples, frames = synth.synthesize("bead")
        assert len(frames) == 4
        assert len(samples) == 256 * sum(frames)
        again, _ = synth.synthesize("bead")
        assert samples == again, "synthesis is not deterministic"

        wav = os.path.join(tmp, "bead.wav")
        assert synth.synthesize_to_wav("bead", wav) == len(samples)
        png = os.path.join(tmp, "bead.png")
        assert 0.0 <= synth.plot_alignment("bead", png) <= 1.0
        assert os.path.getsize(png) > 0

        ref = os.path.join(tmp, "demo", "corpus", "wavs", "tone_0000.wav")
        assert rt.mcd13(ref, ref) == 0.0
        assert rt.rmse_f0(ref, ref) == 0.0
        assert rt.mcd13(ref, wav) > 0.0
        assert rt.duration_error([1.0, 2.5], [1, 2]) == 0.25

        try:
            synth.synthesize("   ")
        except ValueError as e:
            assert "empty" in str(e)
        else:
            raise AssertionError("empty text accepted")
        try:
            rt.Synthesizer(os.path.join(tmp, "missing"))
        except ValueError:
            pass
        else:
            raise AssertionError("missing checkpoint accepted")
    print("python smoke test passed")


if __name__ == "__main__":
    main()
