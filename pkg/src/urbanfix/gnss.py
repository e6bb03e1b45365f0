"""GPS fix ingestion: horizontal error estimation and NMEA 0183 GGA parsing.

Only the GGA sentence is handled; it is the one carrying HDOP and fix
quality. Other sentence types are rejected with a typed error rather than
skipped, so stream filtering stays in the caller's hands.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import reduce
from operator import xor

from .geodesy import GeoPoint


class NmeaError(ValueError):
    """Base class for NMEA sentence parsing failures."""


class ChecksumMismatchError(NmeaError):
    """The sentence's XOR checksum does not match its payload."""


class NotGgaSentenceError(NmeaError):
    """The sentence is valid NMEA but not a GGA sentence."""


class MalformedFieldError(NmeaError):
    """A required field is missing, empty, or fails to parse."""


class InvalidFixError(ValueError):
    """The fix has quality 0 and must not be used for localization."""


@dataclass(frozen=True)
class GpsFix:
    """One GPS reading: position, HDOP, fix quality, optional UTC time.

    A fix_quality of 0 marks an invalid fix; such fixes parse fine but are
    rejected by every operation that would act on them.
    """

    point: GeoPoint
    hdop: float
    fix_quality: int = 1
    timestamp: str | None = None

    def __post_init__(self) -> None:
        if not math.isfinite(self.hdop) or self.hdop < 0:
            raise ValueError(f"hdop must be >= 0, got {self.hdop!r}")
        if self.fix_quality < 0:
            raise ValueError(f"fix_quality must be >= 0, got {self.fix_quality!r}")


@dataclass(frozen=True)
class ErrorModel:
    """Receiver error model for horizontal position error estimates.

    uere_m is the User Equivalent Range Error; 10.2 m reflects a filtered
    consumer receiver. confidence_factor 2.0 turns HDOP * UERE into the
    conventional ~98%-confidence radius. The factor is stored rather than
    hard-coded so other confidence levels stay configurable.
    """

    uere_m: float = 10.2
    confidence_factor: float = 2.0

    def __post_init__(self) -> None:
        if not (self.uere_m > 0):
            raise ValueError(f"uere_m must be positive, got {self.uere_m!r}")
        if not (self.confidence_factor > 0):
            raise ValueError(
                f"confidence_factor must be positive, got {self.confidence_factor!r}"
            )


DEFAULT_ERROR_MODEL = ErrorModel()


def estimated_position_error(fix: GpsFix, model: ErrorModel = DEFAULT_ERROR_MODEL) -> float:
    """Horizontal error radius in meters: confidence_factor * HDOP * UERE.

    Raises InvalidFixError for quality-0 fixes: an error radius derived
    from an invalid fix would be meaningless.
    """
    if fix.fix_quality == 0:
        raise InvalidFixError("fix_quality is 0; refusing to estimate position error")
    return model.confidence_factor * fix.hdop * model.uere_m


def nmea_checksum(payload: str) -> int:
    """XOR of all character values between '$' and '*' (exclusive)."""
    return reduce(xor, (ord(c) for c in payload), 0)


def _field(fields: list[str], index: int, name: str) -> str:
    if index >= len(fields):
        raise MalformedFieldError(f"GGA sentence too short: missing field {name!r}")
    return fields[index]


def _required_float(fields: list[str], index: int, name: str) -> float:
    raw = _field(fields, index, name)
    if raw == "":
        raise MalformedFieldError(f"empty {name!r} field")
    try:
        return float(raw)
    except ValueError:
        raise MalformedFieldError(f"unparseable {name!r} field: {raw!r}") from None


def _parse_angle(raw: str, hemisphere: str, name: str, positive: str, negative: str) -> float:
    """Convert NMEA ddmm.mmmm / dddmm.mmmm plus hemisphere to signed degrees."""
    if raw == "":
        raise MalformedFieldError(f"empty {name!r} field")
    dot = raw.find(".")
    ipos = dot if dot >= 0 else len(raw)
    if ipos < 3:
        raise MalformedFieldError(f"{name!r} field too short: {raw!r}")
    try:
        degrees = int(raw[: ipos - 2])
        minutes = float(raw[ipos - 2 :])
    except ValueError:
        raise MalformedFieldError(f"unparseable {name!r} field: {raw!r}") from None
    if not (0.0 <= minutes < 60.0):
        raise MalformedFieldError(f"{name!r} minutes out of range: {raw!r}")
    value = degrees + minutes / 60.0
    if hemisphere == positive:
        return value
    if hemisphere == negative:
        return -value
    raise MalformedFieldError(f"bad {name!r} hemisphere: {hemisphere!r}")


def _parse_timestamp(raw: str) -> str | None:
    if raw == "":
        return None
    head = raw.split(".", 1)[0]
    if len(head) != 6 or not head.isdigit():
        raise MalformedFieldError(f"unparseable UTC time field: {raw!r}")
    return f"{head[0:2]}:{head[2:4]}:{head[4:6]}"


def parse_gga(sentence: str) -> GpsFix:
    """Parse one NMEA 0183 GGA sentence into a GpsFix.

    The sentence must start with '$', end with '*' plus a two-hex-digit XOR
    checksum, and be a GGA sentence from any talker (GPGGA, GNGGA, ...).
    Latitude/longitude are converted from ddmm.mmmm plus hemisphere to
    signed decimal degrees; HDOP comes from field 8 and fix quality from
    field 6. Every failure raises a distinct NmeaError subclass; arbitrary
    input never raises anything else.
    """
    s = sentence.strip()
    if not s.startswith("$"):
        raise MalformedFieldError("sentence does not start with '$'")
    star = s.rfind("*")
    if star < 0 or len(s) - star != 3:
        raise MalformedFieldError("sentence does not end with '*' + 2-digit checksum")
    payload = s[1:star]
    try:
        given = int(s[star + 1 :], 16)
    except ValueError:
        raise MalformedFieldError(f"unparseable checksum: {s[star + 1:]!r}") from None
    computed = nmea_checksum(payload)
    if computed != given:
        raise ChecksumMismatchError(
            f"checksum mismatch: sentence says {given:02X}, payload XORs to {computed:02X}"
        )

    fields = payload.split(",")
    talker = fields[0]
    if len(talker) != 5 or not talker.endswith("GGA"):
        raise NotGgaSentenceError(f"not a GGA sentence: {talker!r}")

    timestamp = _parse_timestamp(_field(fields, 1, "utc time"))
    lat = _parse_angle(_field(fields, 2, "latitude"), _field(fields, 3, "lat hemisphere"),
                       "latitude", "N", "S")
    lon = _parse_angle(_field(fields, 4, "longitude"), _field(fields, 5, "lon hemisphere"),
                       "longitude", "E", "W")
    quality_raw = _field(fields, 6, "fix quality")
    if not quality_raw.isdigit():
        raise MalformedFieldError(f"unparseable fix quality: {quality_raw!r}")
    hdop = _required_float(fields, 8, "hdop")

    try:
        point = GeoPoint(lat, lon)
        return GpsFix(point=point, hdop=hdop, fix_quality=int(quality_raw),
                      timestamp=timestamp)
    except NmeaError:
        raise
    except ValueError as exc:
        raise MalformedFieldError(str(exc)) from None
