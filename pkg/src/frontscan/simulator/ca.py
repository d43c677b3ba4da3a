"""Throwaway certificate authority for the local edge simulator.

The CA key and certificate persist in a state directory so repeated runs
can share one trust anchor.  Leaf certificates are minted on demand and
cached per name set.  Nothing here touches the system trust store.
"""

from __future__ import annotations

import datetime
import hashlib
import tempfile
import threading
from pathlib import Path

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.x509.oid import ExtendedKeyUsageOID, NameOID

_VALIDITY = datetime.timedelta(days=30)


def _write_key(key, path: Path) -> None:
    path.write_bytes(key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    ))
    path.chmod(0o600)


class TestCA:
    __test__ = False  # not a pytest class

    def __init__(self, state_dir: str | Path | None = None):
        if state_dir is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="frontscan-ca-")
            state_dir = self._tmp.name
        self.state_dir = Path(state_dir)
        self.state_dir.mkdir(parents=True, exist_ok=True)
        self.cert_path = self.state_dir / "ca.pem"
        self._key_path = self.state_dir / "ca.key"
        self._lock = threading.Lock()
        self._leaves: dict[tuple[str, ...], tuple[Path, Path]] = {}
        if self.cert_path.exists() and self._key_path.exists():
            self._key = serialization.load_pem_private_key(self._key_path.read_bytes(), None)
            self._cert = x509.load_pem_x509_certificate(self.cert_path.read_bytes())
        else:
            self._mint_root()

    def _mint_root(self) -> None:
        self._key = ec.generate_private_key(ec.SECP256R1())
        name = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, "frontscan simulator test CA")])
        now = datetime.datetime.now(datetime.timezone.utc)
        self._cert = (
            x509.CertificateBuilder()
            .subject_name(name)
            .issuer_name(name)
            .public_key(self._key.public_key())
            .serial_number(x509.random_serial_number())
            .not_valid_before(now - datetime.timedelta(days=1))
            .not_valid_after(now + 10 * _VALIDITY)
            .add_extension(x509.BasicConstraints(ca=True, path_length=0), critical=True)
            .add_extension(x509.KeyUsage(
                digital_signature=True, key_cert_sign=True, crl_sign=True, content_commitment=False,
                key_encipherment=False, data_encipherment=False, key_agreement=False,
                encipher_only=False, decipher_only=False), critical=True)
            .sign(self._key, hashes.SHA256())
        )
        _write_key(self._key, self._key_path)
        self.cert_path.write_bytes(self._cert.public_bytes(serialization.Encoding.PEM))

    def leaf(self, names: list[str] | tuple[str, ...]) -> tuple[Path, Path]:
        """Return (cert_path, key_path) for a leaf whose CN is names[0] and whose SANs are all names."""
        names = tuple(n.lower() for n in names)
        if not names:
            raise ValueError("a leaf certificate needs at least one name")
        with self._lock:
            if names in self._leaves:
                return self._leaves[names]
            key = ec.generate_private_key(ec.SECP256R1())
            now = datetime.datetime.now(datetime.timezone.utc)
            cert = (
                x509.CertificateBuilder()
                .subject_name(x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, names[0])]))
                .issuer_name(self._cert.subject)
                .public_key(key.public_key())
                .serial_number(x509.random_serial_number())
                .not_valid_before(now - datetime.timedelta(days=1))
                .not_valid_after(now + _VALIDITY)
                .add_extension(x509.SubjectAlternativeName([x509.DNSName(n) for n in names]), critical=False)
                .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
                .add_extension(x509.ExtendedKeyUsage([ExtendedKeyUsageOID.SERVER_AUTH]), critical=False)
                .sign(self._key, hashes.SHA256())
            )
            stem = hashlib.sha256("|".join(names).encode()).hexdigest()[:16]
            leaf_dir = self.state_dir / "leaves"
            leaf_dir.mkdir(exist_ok=True)
            cert_path, key_path = leaf_dir / f"{stem}.pem", leaf_dir / f"{stem}.key"
            cert_path.write_bytes(cert.public_bytes(serialization.Encoding.PEM)
                                  + self._cert.public_bytes(serialization.Encoding.PEM))
            _write_key(key, key_path)
            self._leaves[names] = (cert_path, key_path)
            return cert_path, key_path
