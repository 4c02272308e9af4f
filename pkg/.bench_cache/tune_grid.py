import sys, time
import numpy as np
from eegtta.data import SynthConfig, loso_folds, synth_stream
from eegtta.report import ProtocolConfig, SynthProvider, checkpoint_for_fold, _run_fold
from eegtta.adapter import AdaptConfig
from eegtta.losses import energy_score

def run(tag, synth, protocol, modes, folds_n=5, seed=0, adapt=None):
    adapt = adapt or AdaptConfig()
    provider = SynthProvider(synth, protocol)
    folds = loso_folds(provider.subjects())[:folds_n]
    per_mode = {m: [] for m in modes}
    e_lims = []
    for fold in folds:
        net = checkpoint_for_fold(provider, protocol, fold)
        records = provider.target_stream(fold[1], seed)
        batch = np.stack([r.segment for r in records[:64]])[:, None].astype(np.float32)
        es = energy_score(net.forward(batch, keep_cache=False).logits)
        e_lims.append((es.min(), es.max()))
        for mode in modes:
            m, _ = _run_fold(provider, adapt, mode, protocol, seed, fold)
            per_mode[mode].append(m["f1"])
    emin = min(e[0] for e in e_lims); emax = max(e[1] for e in e_lims)
    cells = "  ".join(f"{m}={np.mean(v):5.1f}" for m, v in per_mode.items())
    detail = " ".join(f"{v:.0f}" for v in per_mode[modes[-1]])
    print(f"{tag}: E=[{emin:.1f},{emax:.1f}]  {cells}   last-mode folds: {detail}", flush=True)
    return per_mode
