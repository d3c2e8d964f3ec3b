"""Batched adaptive Simpson quadrature.

Many integrals are refined together: every pass evaluates the integrand once
on the midpoints of all still-open panels, so the Python overhead is per pass
rather than per panel.
"""
import numpy as np


class QuadratureError(RuntimeError):
    pass


def simpson_batch(func, a, b, rtol=1e-10, atol=1e-15, panels=8, max_depth=48,
                  max_panels=4_000_000, noise=1e-12):
    """Integrate ``func`` over each interval [a[k], b[k]].

    ``func(x, k)`` is called with flat arrays of abscissae and the index of
    the integral each abscissa belongs to, and must return values of the same
    shape. Returns an array of integrals, one per interval. ``noise`` is the
    relative panel error below which refinement stops regardless of the
    halved tolerance; it keeps rounding noise in the integrand from forcing
    endless bisection.
    """
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    a, b = np.broadcast_arrays(a, b)
    count = a.size
    a = a.ravel()
    b = b.ravel()
    out = np.zeros(count)
    if count == 0:
        return out

    # initial uniform split of every interval into `panels` pieces
    owner = np.repeat(np.arange(count), panels)
    frac = np.tile(np.arange(panels), count)
    width = (b - a)[owner] / panels
    left = a[owner] + frac * width
    right = left + width
    mid = 0.5 * (left + right)
    x = np.concatenate([left, mid, right])
    k3 = np.concatenate([owner, owner, owner])
    fx = func(x, k3)
    n = owner.size
    fl, fm, fr = fx[:n], fx[n:2 * n], fx[2 * n:]
    whole = width / 6.0 * (fl + 4.0 * fm + fr)

    # per-integral tolerance from the coarse estimate, split across panels
    coarse = np.zeros(count)
    np.add.at(coarse, owner, whole)
    scale = np.maximum(rtol * np.abs(coarse), atol)
    tol = scale[owner] / panels

    for _ in range(max_depth):
        if owner.size == 0:
            break
        w = right - left
        lm = left + 0.25 * w
        rm = left + 0.75 * w
        fx = func(np.concatenate([lm, rm]), np.concatenate([owner, owner]))
        n = owner.size
        flm, frm = fx[:n], fx[n:]
        lhalf = w / 12.0 * (fl + 4.0 * flm + fm)
        rhalf = w / 12.0 * (fm + 4.0 * frm + fr)
        err = lhalf + rhalf - whole
        # panels whose width or error is at the integrand's noise level are
        # accepted as they stand
        eps = np.finfo(float).eps
        done = ((np.abs(err) <= 15.0 * tol)
                | (np.abs(err) <= noise * np.abs(lhalf + rhalf) + 1e-290)
                | (w <= 64 * eps * np.maximum(np.abs(left), np.abs(right))))
        if np.any(done):
            np.add.at(out, owner[done], (lhalf + rhalf + err / 15.0)[done])
        keep = ~done
        if not np.any(keep):
            owner = owner[keep]
            break
        o = owner[keep]
        owner = np.concatenate([o, o])
        left, right = (np.concatenate([left[keep], mid[keep]]),
                       np.concatenate([mid[keep], right[keep]]))
        nfl = np.concatenate([fl[keep], fm[keep]])
        nfr = np.concatenate([fm[keep], fr[keep]])
        fm = np.concatenate([flm[keep], frm[keep]])
        fl, fr = nfl, nfr
        whole = np.concatenate([lhalf[keep], rhalf[keep]])
        tol = np.concatenate([tol[keep], tol[keep]]) / 2.0
        mid = 0.5 * (left + right)
        if owner.size > max_panels:
            raise QuadratureError(f"adaptive Simpson exceeded {max_panels} open panels")
    else:
        if owner.size:
            raise QuadratureError(
                f"adaptive Simpson did not converge on {np.unique(owner).size} integrals")
    return out


def simpson(func, a, b, **kw):
    """Scalar convenience wrapper around :func:`simpson_batch`."""
    return float(simpson_batch(lambda x, k: func(x), [a], [b], **kw)[0])
