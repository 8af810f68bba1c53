"""Independent wide-integer oracle used by the test suite.

Everything here is plain Python integer arithmetic, written from the layer
semantics directly and kept independent of the package's kernel code so the
two can check each other. The fold orders match the documented contracts:
conv taps in (channel, row, col) order, dense columns ascending, sparse
rows in CSR order with the bias as the fold seed.
"""


def o_sat(x):
    return 32767 if x > 32767 else (-32768 if x < -32768 else x)


def o_qmul(a, b):
    p = int(a) * int(b)
    if p >= 0:
        return o_sat((p + 16384) >> 15)
    return o_sat(-((-p + 16384) >> 15))


def o_qadd(a, b):
    return o_sat(int(a) + int(b))


def o_qshift(v, s):
    v = int(v)
    if s == 0:
        return v
    if s > 0:
        bias = 1 << (s - 1)
        return (v + bias) >> s if v >= 0 else -((-v + bias) >> s)
    return o_sat(v << (-s))


def o_epilogue(v, bias, shift, relu):
    if bias is not None:
        v = o_qadd(v, bias)
    v = o_qshift(v, shift)
    if relu and v < 0:
        v = 0
    return v


def o_conv2d(w, x, bias, shift, relu):
    """w: nested list [o][c][fr][fc]; x: [c][h][wd]; bias: list per o or None."""
    o_n = len(w)
    c_n = len(w[0])
    kh = len(w[0][0])
    kw = len(w[0][0][0])
    h = len(x[0])
    wd = len(x[0][0])
    oh, ow = h - kh + 1, wd - kw + 1
    out = [[[None] * ow for _ in range(oh)] for _ in range(o_n)]
    for o in range(o_n):
        for y in range(oh):
            for xx in range(ow):
                acc = None
                for c in range(c_n):
                    for fr in range(kh):
                        for fc in range(kw):
                            f = o_qmul(x[c][y + fr][xx + fc], w[o][c][fr][fc])
                            acc = f if acc is None else o_qadd(acc, f)
                out[o][y][xx] = o_epilogue(
                    acc, None if bias is None else bias[o], shift, relu
                )
    return out


def o_conv1d_axis(x, filt, axis):
    """1-D valid convolution of a 3-D nested list along the given axis."""
    dims = (len(x), len(x[0]), len(x[0][0]))
    taps = len(filt)
    out_dims = list(dims)
    out_dims[axis] = dims[axis] - taps + 1
    out = [
        [[None] * out_dims[2] for _ in range(out_dims[1])] for _ in range(out_dims[0])
    ]
    for a in range(out_dims[0]):
        for b in range(out_dims[1]):
            for c in range(out_dims[2]):
                acc = None
                for t in range(taps):
                    idx = [a, b, c]
                    idx[axis] += t
                    f = o_qmul(x[idx[0]][idx[1]][idx[2]], filt[t])
                    acc = f if acc is None else o_qadd(acc, f)
                out[a][b][c] = acc
    return out


def o_triple(f_ch, f_row, f_col, x, bias, shift, relu):
    y = o_conv1d_axis(x, f_ch, 0)
    y = o_conv1d_axis(y, f_row, 1)
    y = o_conv1d_axis(y, f_col, 2)
    for a in range(len(y)):
        for b in range(len(y[0])):
            for c in range(len(y[0][0])):
                y[a][b][c] = o_epilogue(
                    y[a][b][c], None if bias is None else bias[a], shift, relu
                )
    return y


def o_dense_fold(w, x):
    m, n = len(w), len(w[0])
    out = [None] * m
    for r in range(m):
        acc = None
        for c in range(n):
            f = o_qmul(w[r][c], x[c])
            acc = f if acc is None else o_qadd(acc, f)
        out[r] = acc
    return out


def o_dense(w, x, bias, shift, relu):
    acc = o_dense_fold(w, x)
    return [
        o_epilogue(acc[r], None if bias is None else bias[r], shift, relu)
        for r in range(len(acc))
    ]


def o_pair(a, b, x, bias, shift, relu):
    mid = o_dense_fold(b, x)
    acc = o_dense_fold(a, mid)
    return [
        o_epilogue(acc[r], None if bias is None else bias[r], shift, relu)
        for r in range(len(acc))
    ]


def o_sparse(m, offsets, cols, vals, x, bias, shift, relu):
    out = []
    for r in range(m):
        acc = 0 if bias is None else int(bias[r])
        for j in range(offsets[r], offsets[r + 1]):
            acc = o_qadd(acc, o_qmul(vals[j], x[cols[j]]))
        out.append(o_epilogue(acc, None, shift, relu))
    return out


def _flatten(nested):
    if isinstance(nested, list):
        out = []
        for item in nested:
            out.extend(_flatten(item))
        return out
    return [nested]


def o_infer(net, inp_list):
    """Net-level oracle over a NetworkModel, computed with plain ints."""
    x = inp_list
    for lay in net.layers:
        if lay.kind == "conv2d":
            x = o_conv2d(lay.weight.data.tolist(), x,
                         None if lay.bias is None else lay.bias.data.tolist(),
                         lay.shift, lay.relu)
        elif lay.kind == "conv1d_separated_triple":
            x = o_triple(lay.f_ch.data.tolist(), lay.f_row.data.tolist(),
                         lay.f_col.data.tolist(), x,
                         None if lay.bias is None else lay.bias.data.tolist(),
                         lay.shift, lay.relu)
        elif lay.kind == "fc_dense":
            x = o_dense(lay.weight.data.tolist(), _flatten(x),
                        None if lay.bias is None else lay.bias.data.tolist(),
                        lay.shift, lay.relu)
        elif lay.kind == "fc_separated_pair":
            x = o_pair(lay.a.data.tolist(), lay.b.data.tolist(), _flatten(x),
                       None if lay.bias is None else lay.bias.data.tolist(),
                       lay.shift, lay.relu)
        elif lay.kind == "fc_sparse":
            w = lay.weight
            x = o_sparse(w.m, w.offsets.tolist(), w.cols.tolist(),
                         w.vals.tolist(), _flatten(x),
                         None if lay.bias is None else lay.bias.data.tolist(),
                         lay.shift, lay.relu)
        else:
            raise AssertionError(lay.kind)
    return _flatten(x)
