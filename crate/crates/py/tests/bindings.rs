use pyo3::ffi::c_str;
use asd_py::asd_py as asd_module;
use pyo3::prelude::*;

fn run(code: &std::ffi::CStr) {
    pyo3::append_to_inittab!(asd_module);
    Python::attach(|py| {
        if let Err(e) = py.run(code, None, None) {
            e.print(py);
            panic!("python snippet failed");
        }
    });
}

#[test]
fn metrics_config_model_and_checkpoint() {
    run(c_str!(
        r#"
import math, tempfile, os
import asd_py

assert asd_py.roc_auc([0.9, 0.1, 0.5], [True, False, False]) == 1.0
assert abs(asd_py.partial_auc([0.1, 0.9, 0.5, 0.4], [True, False, True, False], 0.5) - 0.0) < 1e-12
try:
    asd_py.partial_auc([0.1, 0.2], [True, False], 0.0)
    raise SystemExit("max_fpr 0 accepted")
except ValueError:
    pass

try:
    asd_py.Config([("n_mels", "lots")])
    raise SystemExit("bad value accepted")
except ValueError:
    pass

cfg = asd_py.Config([("sample_rate", "16000"), ("clip_seconds", "0.25"), ("win_ms", "64"),
                     ("n_mels", "16"), ("h", "8"), ("wavegram_multiplier", "2"),
                     ("width_mult", "0.125"), ("epochs", "1"), ("batch", "8")])
assert cfg.clip_samples == 4000
assert cfg.to_dict()["features"]["n_mels"] == 16

with tempfile.TemporaryDirectory() as tmp:
    data = os.path.join(tmp, "d")
    asd_py.write_synthetic(data, seconds=0.25, train=4, test_normal=2, test_anomalous=2)
    out = os.path.join(tmp, "m.asdc")
    hist = asd_py.train(cfg, data, out)
    assert len(hist) == 1 and math.isfinite(hist[0]["loss"])
    ck = asd_py.Checkpoint.load(out)
    assert ck.labels[0] == ("hum", "00") and ck.config.classes == 4
    m = ck.model()
    clip = asd_py.decode_wav(os.path.join(data, "whine", "test", "anomaly_id_00_00000003.wav"), 16000)
    a = m.scores([clip], [ck.class_of("whine:00")])
    ck.save(os.path.join(tmp, "copy.asdc"))
    b = asd_py.Checkpoint.load(os.path.join(tmp, "copy.asdc")).model().scores([clip], [2])
    assert a == b, (a, b)
    try:
        ck.class_of("fan:00")
        raise SystemExit("unknown label accepted")
    except ValueError:
        pass
"#
    ));
}
