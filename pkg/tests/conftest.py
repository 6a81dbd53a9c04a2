import numpy as np
import pytest
import torch

from reground.wiring import DenoiserConfig


def central_fd(fn, tensor: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central finite differences of scalar ``fn()`` w.r.t. every entry of ``tensor`` (in place)."""
    grad = torch.zeros_like(tensor)
    flat = tensor.data.view(-1)
    gflat = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        fp = fn().item()
        flat[i] = orig - eps
        fm = fn().item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def rel_err(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-6) -> float:
    # the floor keeps analytically-zero gradients (e.g. key biases) from dividing noise by noise
    denom = max(a.norm().item(), b.norm().item(), floor)
    return (a - b).norm().item() / denom


def check_gradients(fn, tensors: dict, tol: float, eps: float = 1e-5) -> dict:
    """Relative error between autograd and central differences for each named tensor."""
    for t in tensors.values():
        if t.grad is not None:
            t.grad = None
    fn().backward()
    errors = {}
    for name, t in tensors.items():
        analytic = t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t)
        with torch.no_grad():
            numeric = central_fd(fn, t, eps)
        errors[name] = rel_err(analytic, numeric)
    bad = {k: v for k, v in errors.items() if not v < tol}
    assert not bad, f"gradient mismatch: {bad}"
    return errors


# --- independent numpy reference for attention ------------------------------------


def np_layer_norm(x, weight, bias, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * weight + bias


def np_attention(h_q, h_kv, p, heads=1, key_mask=None):
    """Straight-line attention: explicit loops over heads and queries."""
    q = h_q @ p["q.weight"].T + p["q.bias"]
    k = h_kv @ p["k.weight"].T + p["k.bias"]
    v = h_kv @ p["v.weight"].T + p["v.bias"]
    d = q.shape[1]
    dh = d // heads
    out = np.zeros((h_q.shape[0], d))
    for hd in range(heads):
        sl = slice(hd * dh, (hd + 1) * dh)
        for i in range(h_q.shape[0]):
            scores = np.array([q[i, sl] @ k[j, sl] / np.sqrt(dh) for j in range(h_kv.shape[0])])
            if key_mask is not None:
                scores = np.where(key_mask, scores, -np.inf)
            w = np.exp(scores - scores.max())
            w /= w.sum()
            out[i, sl] = sum(w[j] * v[j, sl] for j in range(h_kv.shape[0]))
    return out @ p["o.weight"].T + p["o.bias"]


def np_params(module) -> dict:
    return {k: v.detach().numpy().copy() for k, v in module.state_dict().items()}


@pytest.fixture
def tiny_config():
    return DenoiserConfig(image_size=8, patch_size=2, d_model=8, d_text=4, label_dim=4, layers=2,
                          num_bands=2, train_steps=20)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    yield


# --- acceptance reporting ---------------------------------------------------------

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion this test checks")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not report.failed:
        return
    n, title = marker.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True})
    entry["ok"] &= not report.failed


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if e['ok'] else 'FAIL'}  {e['title']}")
