"""Build a small computation on the tape, check its gradients against
central finite differences, then minimise it with Adam."""
from lcm.core import Adam, Rng, Tensor, backward, clear_tape, finite_difference_check, gelu, layer_norm, matmul

rng = Rng(0, "demo")
w = Tensor(rng.normal((6, 3)), requires_grad=True, name="w")
gain = Tensor(rng.normal(6) + 1.0, requires_grad=True, name="gain")
bias = Tensor(rng.normal(6), requires_grad=True, name="bias")
x = Tensor(rng.normal((4, 6)))


def objective():
    out = matmul(gelu(layer_norm(x, gain, bias)), w)
    return (out * out).mean()


report = finite_difference_check(objective, [w, gain, bias])
for name, err in zip(report.names, report.max_rel_error):
    print(f"{name:>5}: max relative error {err:.2e}")
print("gradients agree:", report.ok)

# Each step records a fresh tape, backpropagates it and updates in place.
opt = Adam([w, gain, bias], lr=0.05)
for step in range(201):
    clear_tape()
    loss = objective()
    backward(loss)
    opt.step()
    if step % 50 == 0:
        print(f"step {step:3d}  loss {loss.item():.6f}")
