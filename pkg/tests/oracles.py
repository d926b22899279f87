"""Reference computations shared by the unit and acceptance tests."""


def count_oracle(P, D, G, Gb, scale=2, upsampler="deconv", cm=True, lra=True, gfb=True):
    """Per-layer parameter arithmetic, written out independently of the registry."""
    conv = lambda co, ci, k: co * ci * k * k + co  # noqa: E731
    ci = max(1, Gb // 2)
    # theta, g and z carry biases; phi does not (softmax cancels it)
    nlb = (ci * Gb + ci) + ci * Gb + (ci * Gb + ci) + (Gb * ci + Gb)
    total = conv(Gb, 1, 3) + conv(Gb, Gb, 3)
    for _ in range(P):
        for d in range(1, D + 1):
            cin = Gb + (d - 1) * G if cm else (Gb if d == 1 else (d - 1) * G)
            total += conv(G, cin, 3)
        total += conv(Gb, D * G + (Gb if cm else 0), 1)
        total += nlb if lra else 0
    if gfb:
        total += conv(Gb, P * Gb, 1) + conv(Gb, Gb, 3)
    total += nlb + conv(Gb, Gb, 3)
    if upsampler == "deconv":
        total += (scale // 2) * conv(Gb, Gb, 4)
    else:
        total += conv(Gb * scale * scale, Gb, 3)
    return total + conv(1, Gb, 3)
