"""Collapsed evaluation of the frozen conv -> BN -> depthwise prefix.

During adaptation with frozen source statistics, the first BN is a fixed
per-channel affine in everything except its learnable scale/shift, and
the convolutions around it never change. Linearity of the depthwise
projection then gives, per input channel c and its depth copies (c, d):

    DW(BN1(S))[n,cd,j] = scale_c * DW(S)[n,cd,j] + shift_c * sum_u W[cd,u]

so a segment's entire prefix can be cached as DW(S) (16x smaller than the
raw first-conv activation S) and replayed under new BN parameters with one
fused multiply-add. The BN gradients collapse the same way:

    dbeta_c  = sum_d  Wbar[c,d] * T[c,d]
    dgamma_c = istd_c * (sum_{d,u} W[c,d,u] * A[c,d,u] - mu_c * dbeta_c)

with T the per-output-channel total of the incoming gradient, A its
correlation with the cached S, and Wbar the kernel column sums. Only A
touches the full-resolution tensor, as a single batched GEMM.

Results are numerically identical to the layer-by-layer path up to float
associativity; the tests pin both routes against each other.
"""

import numpy as np

from . import layers as L


class FrozenSandwich:
    """Fast prefix evaluator; applies when the network starts with
    Conv2D -> BatchNorm(fixed_source) -> full-height DepthwiseConv2D."""

    BOUNDARY = 3  # index of the first layer executed normally

    def __init__(self, net):
        self.net = net
        self.conv = net.layers[0]
        self.bn = net.layers[1]
        self.dw = net.layers[2]

    @staticmethod
    def applies(net, bn_mode):
        if bn_mode != L.BN_FIXED_SOURCE or len(net.layers) < 4:
            return False
        a, b, c = net.layers[0], net.layers[1], net.layers[2]
        return (type(a) is L.Conv2D and a.bias is None
                and isinstance(b, L.BatchNorm)
                and isinstance(c, L.DepthwiseConv2D) and c.bias is None
                and c.kernel[1] == 1 and c.pad == (0, 0, 0, 0)
                and c.kernel[0] == a.out_shape(net.input_shape)[1]
                and isinstance(net.layers[3], L.BatchNorm))

    # ---- frozen per-segment caches ------------------------------------------

    def project(self, batch):
        """(S, DS): first-conv activations and their depthwise projection."""
        s, _ = self.conv.forward(batch, phase=L.PHASE_EVAL)
        ds, _ = self.dw.forward(s, phase=L.PHASE_EVAL)
        return s, ds

    # ---- replay under current BN parameters ----------------------------------

    def _affine(self):
        inv_std = 1.0 / np.sqrt(self.bn.running_var + self.bn.eps)
        scale = (self.bn.gamma * inv_std).astype(self.net.dtype)
        shift = (self.bn.beta - self.bn.running_mean * scale).astype(
            self.net.dtype)
        return scale, shift, inv_std

    def _kernel_views(self):
        cin = self.conv.out_channels
        depth = self.dw.depth_multiplier
        kh = self.dw.kernel[0]
        return self.dw.weight.reshape(cin, depth, kh), cin, depth

    def head_input(self, ds):
        """DW(BN1(S)) from the cached DS under the current gamma/beta."""
        scale, shift, _ = self._affine()
        w, cin, depth = self._kernel_views()
        wbar = w.sum(axis=2)                      # (cin, depth)
        gain = np.repeat(scale, depth).astype(self.net.dtype)
        offset = (shift[:, None] * wbar).reshape(-1).astype(self.net.dtype)
        y = ds * gain[:, None, None]
        y += offset[:, None, None]
        return y

    def bn_gradients(self, s_batch, dy):
        """(dgamma, dbeta) of the first BN from the gradient at the
        depthwise output.

        ``s_batch`` holds the batch's first-conv activations in natural
        (batch, cin, kh, width) layout; ``dy`` is (batch, cin*depth, 1, w).
        The only full-resolution work is one contiguous batched GEMM.
        """
        w, cin, depth = self._kernel_views()
        kh = w.shape[2]
        n, _, _, width = dy.shape
        dyg = dy.reshape(n, cin, depth, width)
        t = dyg.sum(axis=(0, 3))                  # (cin, depth)
        dyt = np.ascontiguousarray(dyg.transpose(0, 1, 3, 2)).reshape(
            n * cin, width, depth)
        a = s_batch.reshape(n * cin, kh, width) @ dyt  # (n*cin, kh, depth)
        a = a.reshape(n, cin, kh, depth).sum(axis=0).transpose(0, 2, 1)
        _, _, inv_std = self._affine()
        dbeta = (w.sum(axis=2) * t).sum(axis=1)
        dgamma = inv_std * ((w * a).sum(axis=(1, 2))
                            - self.bn.running_mean * dbeta)
        return (dgamma.astype(np.float64), dbeta.astype(np.float64))
