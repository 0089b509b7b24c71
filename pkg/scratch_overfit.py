"""Rehearsal of the end-to-end overfit protocol (criterion 6 shape)."""
import time, numpy as np, torch
from vtoff.synthetic import SyntheticSpec, render_synthetic_sample
from vtoff.conditioning import Image, Mask, Sample
from vtoff.pipeline import apply_mask_kind, build_inputs, build_bundle
from vtoff.training import TrainState, StageConfig, training_step, make_optimizer
from vtoff.diffusion import SamplerConfig, sample as ddim_sample
from vtoff.dual_unet import build, DualUNetConfig
from vtoff.metrics import ssim

def make_data(n=8, seed=7):
    spec = SyntheticSpec(count=n, seed=seed)
    recs = [render_synthetic_sample(spec, i) for i in range(n)]
    return [Sample.build(Image(r["person"]), Image(r["cloth"]), Mask(r["mask"]), r["description"]) for r in recs]

def probe_loss(model, state, prepared, cfg):
    model.eval()
    inputs = build_inputs(prepared, cfg, state.codec)
    with torch.no_grad():
        bundle = build_bundle(model, inputs)
        cache = model.encode_condition(bundle.cond_latents, bundle.cond_text_tokens)
        gen = torch.Generator().manual_seed(123)
        total, count = 0.0, 0
        for t_val in range(1, 1001, 25):
            eps = torch.randn(inputs.z0.shape, generator=gen)
            ab = state.schedule.alpha_bar_at(t_val)
            z_t = np.sqrt(ab) * inputs.z0 + np.sqrt(1 - ab) * eps
            pred, _ = model.predict_eps(z_t, t_val, cache=cache, tokens=bundle.tokens)
            total += float(((pred - eps) ** 2).mean()); count += 1
    model.train()
    return total / count

def run(leffa_on, steps=3000, seed=0, lr=2e-3):
    data = make_data()
    cfg = DualUNetConfig.preset("small")
    model = build(cfg, rng_seed=seed)
    prepared = [apply_mask_kind(s, cfg) for s in data]
    state = TrainState.create(model, adapter_seed=seed)
    state.settings.batch_size = 8
    state.settings.hflip_p = 0.0
    state.settings.affine_p = 0.0
    stage = StageConfig(trainable="joint", leffa_on=leffa_on, color_aug_on=False, epochs=1, lr=lr)
    opt = make_optimizer(state, stage)
    t0 = time.time()
    for step in range(steps):
        loss, parts = training_step(state, stage, prepared, step_seed=1000 + step)
        opt.zero_grad(set_to_none=True); loss.backward(); opt.step()
        if step % 500 == 0:
            print(f"[leffa={leffa_on}] step {step:4d} l_diff {parts['l_diff']:.4f} ({time.time()-t0:.0f}s)", flush=True)
    pl = probe_loss(model, state, prepared, cfg)
    print(f"[leffa={leffa_on}] probe diffusion loss after {steps}: {pl:.4f} ({time.time()-t0:.0f}s)", flush=True)
    model.eval()
    ssims = []
    for s in prepared:
        inputs = build_inputs([s], cfg, state.codec)
        bundle = build_bundle(model, inputs)
        img = ddim_sample(model, bundle, SamplerConfig(steps=30, cfg_scale=2.0, seed=42))
        ssims.append(ssim(img, s.garment))
    print(f"[leffa={leffa_on}] mean SSIM: {np.mean(ssims):.4f} per-sample: {[f'{v:.3f}' for v in ssims]}", flush=True)
    print(f"[leffa={leffa_on}] total time: {time.time()-t0:.0f}s", flush=True)
    return pl, float(np.mean(ssims))

if __name__ == "__main__":
    pl_off, ssim_off = run(False)
    pl_on, ssim_on = run(True)
    print(f"SUMMARY off: loss {pl_off:.4f} ssim {ssim_off:.4f} | on: loss {pl_on:.4f} ssim {ssim_on:.4f} | delta ssim {ssim_off - ssim_on:+.4f}")
