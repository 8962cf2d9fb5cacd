from __future__ import annotations

import os
from dataclasses import dataclass, field

import pytest

from softvault import attestation as at
from softvault import certkit, keyvault, soft_tee
from softvault.attestation import QuoteType
from softvault.protocols import OrgContext, ProvisionParty

PIN = "4321"


@dataclass
class Node:
    """One simulated machine: platform secret, quoting enclave, vault."""

    name: str
    platform: soft_tee.PlatformSecret
    enclave: soft_tee.Enclave
    qe: at.QuotingEnclave
    token: keyvault.Token
    path: str
    pin: str = PIN

    @property
    def platform_id(self) -> bytes:
        return self.platform.platform_id

    @property
    def mrenclave(self) -> bytes:
        return self.enclave.measurement.mrenclave

    def reopen(self, **kw) -> keyvault.Token:
        self.token.close()
        self.token = keyvault.Token.open(self.path, self.pin, self.enclave,
                                         quoter=at.make_quoter(self.enclave, self.qe),
                                         pin_delay=0, **kw)
        return self.token


@dataclass
class World:
    tmp: str
    ias: at.VerificationService
    manufacturer: at.Manufacturer
    nodes: list = field(default_factory=list)

    @property
    def anchors(self) -> at.TrustAnchors:
        return at.TrustAnchors(manufacturer_root=self.manufacturer.root_cert, ias=self.ias,
                               ias_public_key=self.ias.public_key)

    def node(self, name: str, *, enroll: bool = True, svn: int = 1,
             image: bytes | None = None, platform: soft_tee.PlatformSecret | None = None) -> Node:
        platform = platform or soft_tee.PlatformSecret.generate()
        if image is None:
            enclave = soft_tee.Enclave.default(platform, svn=svn)
        else:
            enclave = soft_tee.Enclave(platform, soft_tee.measure_enclave(image, svn=svn))
        qe = at.QuotingEnclave(platform,
                               epid=self.ias.enroll(platform.platform_id) if enroll else None,
                               pck_cert=self.manufacturer.issue_pck_cert(platform))
        path = os.path.join(self.tmp, name, "vault.sealed")
        token = keyvault.Token.init(path, PIN, enclave, quoter=at.make_quoter(enclave, qe),
                                    pin_delay=0)
        n = Node(name, platform, enclave, qe, token, path)
        self.nodes.append(n)
        return n

    def close(self):
        for n in self.nodes:
            n.token.close()


@pytest.fixture(scope="session")
def manufacturer():
    return at.Manufacturer.create()


@pytest.fixture(scope="session")
def ias():
    return at.VerificationService.create()


@pytest.fixture
def world(tmp_path, ias, manufacturer):
    w = World(str(tmp_path), ias, manufacturer)
    yield w
    w.close()


def make_ca(world: World, name: str = "ca", quote_type=QuoteType.EPID):
    node = world.node(name)
    cert = certkit.self_sign(f"{name} root", node.token, PIN, quote_type=quote_type)
    return node, cert


@dataclass
class Org:
    admin: Node
    keys: at.OrgKeys
    cache: at.PckCache

    def sanction(self, *nodes: Node) -> None:
        drafts = [at.PckCacheEntry(n.platform_id, n.qe.pck_cert) for n in nodes]
        self.cache.put(at.sign_pck_cache(drafts, self.admin.token, PIN, self.keys.mpk))

    def context(self, world: World, expected=None) -> OrgContext:
        return OrgContext(self.keys.mpk, self.cache, world.anchors, expected_mrenclave=expected)

    def party(self, world: World, node: Node) -> ProvisionParty:
        return ProvisionParty(node.token, PIN, node.platform_id,
                              self.context(world, expected=node.mrenclave))


def make_org(world: World) -> Org:
    admin = world.node("org-admin")
    return Org(admin, at.generate_org_keys(admin.token, PIN), at.PckCache())


# --- protocol helpers shared by protocol and acceptance tests -------------------

def run_issuance(world: World, ca: Node, ca_cert, node: Node, subject: str, capture=None,
                 **kw):
    """Issue ``subject`` to ``node`` through the full issuance protocol over a pipe."""
    from softvault.protocols import CertificateAuthority, MemoryChannel, issuance_ca, \
        issuance_website, run_pair
    authority = CertificateAuthority(ca.token, PIN, ca_cert, world.anchors,
                                     expected_mrenclave=node.mrenclave)
    a, b = MemoryChannel.pair(capture)
    cert, _ = run_pair(
        lambda: issuance_website(a, node.token, PIN, subject, world.anchors, ca.mrenclave, **kw),
        lambda: issuance_ca(b, authority))
    return cert, node.token.find_handle(cert.subject_public_key)


def transfer_party(world: World, node: Node, cert, **kw):
    from softvault.protocols import TransferParty
    kw.setdefault("expected_peer_mrenclave", node.mrenclave)
    return TransferParty(node.token, PIN, node.token.find_handle(cert.subject_public_key), cert,
                         world.anchors, **kw)


class KeyRecorder:
    """Remembers every key object any vault creates, ephemeral ones included."""

    def __init__(self):
        self.objects = []

    def install(self, monkeypatch):
        original = keyvault.Token._store
        recorder = self

        def _store(tok, obj):
            recorder.objects.append(obj)
            return original(tok, obj)

        monkeypatch.setattr(keyvault.Token, "_store", _store)
        return self

    def patterns(self) -> dict[bytes, str]:
        return secret_patterns(self.objects)


@pytest.fixture
def key_recorder(monkeypatch):
    return KeyRecorder().install(monkeypatch)


def secret_patterns(objects) -> dict[bytes, str]:
    """Byte strings that must never leave a vault: DER private keys and their raw scalars."""
    from cryptography.hazmat.primitives.asymmetric import ec, rsa
    from softvault import crypto
    out = {}
    for o in objects:
        if not o.private_part:
            continue
        out[bytes(o.private_part)] = f"{o.label}:der"
        if o.algorithm is crypto.KeyAlgorithm.SECRET:
            continue
        key = crypto.private_from_der(o.private_part)
        if isinstance(key, ec.EllipticCurvePrivateKey):
            out[key.private_numbers().private_value.to_bytes(32, "big")] = f"{o.label}:d"
        elif isinstance(key, rsa.RSAPrivateKey):
            n = key.private_numbers()
            for name, v in (("p", n.p), ("q", n.q), ("d", n.d)):
                out[v.to_bytes((v.bit_length() + 7) // 8, "big")] = f"{o.label}:{name}"
    return out


def scan(blobs, patterns: dict[bytes, str]) -> list[str]:
    """Names of every secret pattern found in any of ``blobs``."""
    hits = []
    for blob in blobs:
        for pat, name in patterns.items():
            if pat in blob:
                hits.append(name)
    return hits


def decode_capture(capture):
    from softvault.noded import frame as wire
    from softvault.protocols import Message
    out = []
    for data in capture:
        f = wire.decode(data)
        out.append(Message.from_payload(f.type, f.session_id, f.payload))
    return out


# --- running daemons -------------------------------------------------------------

@dataclass
class Lab:
    root: str
    info: dict

    def dir(self, name: str) -> str:
        return self.info["nodes"][name]["dir"]

    def address(self, name: str) -> str:
        return self.info["nodes"][name]["address"]

    def addr(self, name: str) -> tuple[str, int]:
        host, port = self.address(name).rsplit(":", 1)
        return host, int(port)

    def anchors(self) -> at.TrustAnchors:
        """What a relying party outside the lab would trust: public files plus the live IAS."""
        from softvault.noded.client import RemoteIas
        root = os.path.join(self.root, "manufacturer", "root.cert")
        with open(os.path.join(self.dir("ias"), "ias.pub")) as f:
            ias_pub = bytes.fromhex(f.read().strip())
        return at.TrustAnchors(manufacturer_root=certkit.BlindCert.load(root),
                               ias=RemoteIas(self.addr("ias")), ias_public_key=ias_pub)


def start_test_lab(root, quote_type=QuoteType.EPID) -> Lab:
    from softvault.blindctl import lab as labmod
    info = labmod.create_lab(root, PIN, quote_type, pin_delay=0)
    labmod.start_lab(root)
    return Lab(str(root), info)


@pytest.fixture(scope="module")
def lab(tmp_path_factory):
    from softvault.blindctl import lab as labmod
    root = tmp_path_factory.mktemp("lab")
    running = start_test_lab(root)
    yield running
    labmod.stop_lab(root)


# --- acceptance reporting ----------------------------------------------------------

ACCEPTANCE_RESULTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[n])
