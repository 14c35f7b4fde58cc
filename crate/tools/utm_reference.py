#!/usr/bin/env python3
"""Arbitrary-precision UTM reference values.

Computes WGS-84 transverse Mercator coordinates with the Krueger n-series
carried to n^6 in 50-digit arithmetic (truncation error is nanometers).
The Rust implementation uses the classic Snyder/USGS series instead, so the
two routes are independent; the frozen values below act as the
cross-implementation oracle in the geodesy tests.
"""

from mpmath import mp, mpf, sin, cos, tan, atan, atan2, asinh, sinh, cosh, sqrt, atanh, pi

mp.dps = 50

A_AXIS = mpf(6378137)
FLATTENING = 1 / mpf("298.257223563")
K0 = mpf("0.9996")
FALSE_EASTING = mpf(500000)
FALSE_NORTHING_S = mpf(10000000)


def utm_forward(lat_deg, lon_deg, zone):
    lat = mpf(lat_deg) * pi / 180
    lon = mpf(lon_deg) * pi / 180
    lon0 = (mpf(zone) * 6 - 183) * pi / 180

    f = FLATTENING
    n = f / (2 - f)
    big_a = A_AXIS / (1 + n) * (1 + n**2 / 4 + n**4 / 64 + n**6 / 256)
    e = sqrt(f * (2 - f))

    alpha = [
        n / 2 - 2 * n**2 / 3 + 5 * n**3 / 16 + 41 * n**4 / 180 - 127 * n**5 / 288 + 7891 * n**6 / 37800,
        13 * n**2 / 48 - 3 * n**3 / 5 + 557 * n**4 / 1440 + 281 * n**5 / 630 - 1983433 * n**6 / 1935360,
        61 * n**3 / 240 - 103 * n**4 / 140 + 15061 * n**5 / 26880 + 167603 * n**6 / 181440,
        49561 * n**4 / 161280 - 179 * n**5 / 168 + 6601661 * n**6 / 7257600,
        34729 * n**5 / 80640 - 3418889 * n**6 / 1995840,
        212378941 * n**6 / 319334400,
    ]

    t = tan(lat)
    sigma = sinh(e * atanh(e * t / sqrt(1 + t**2)))
    tp = t * sqrt(1 + sigma**2) - sigma * sqrt(1 + t**2)
    dlon = lon - lon0
    xi_p = atan2(tp, cos(dlon))
    eta_p = asinh(sin(dlon) / sqrt(tp**2 + cos(dlon) ** 2))

    xi = xi_p
    eta = eta_p
    for j, a in enumerate(alpha, start=1):
        xi += a * sin(2 * j * xi_p) * cosh(2 * j * eta_p)
        eta += a * cos(2 * j * xi_p) * sinh(2 * j * eta_p)

    easting = FALSE_EASTING + K0 * big_a * eta
    northing = K0 * big_a * xi
    if lat < 0:
        northing += FALSE_NORTHING_S
    return easting, northing


POINTS = [
    ("new_york", 40.7128, -74.0060, 18),
    ("sydney", -33.8688, 151.2093, 56),
    ("central_meridian_equator", 0.0, 3.0, 31),
    ("trondheim", 63.4305, 10.3951, 32),
    ("san_francisco", 37.7749, -122.4194, 10),
    ("quito", -0.1807, -78.4678, 17),
    ("cape_town", -33.9249, 18.4241, 34),
]

if __name__ == "__main__":
    for name, lat, lon, zone in POINTS:
        e, nn = utm_forward(lat, lon, zone)
        print(f"{name}: lat={lat} lon={lon} zone={zone}")
        print(f"    easting  = {mp.nstr(e, 15)}")
        print(f"    northing = {mp.nstr(nn, 15)}")
