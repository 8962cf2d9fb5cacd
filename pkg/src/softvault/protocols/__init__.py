"""Issuance, key transfer and provisioning state machines."""

from .channel import MemoryChannel, Session, SocketChannel, TamperChannel, run_pair
from .issuance import CertificateAuthority, fetch_ca_cert, issuance_ca, issuance_website
from .messages import Message, MsgType
from .provision import (
    NodeType,
    OrgContext,
    ProvisionParty,
    backup_restore,
    provision_initiator,
    provision_responder,
)
from .transfer import TransferParty, transfer_initiator, transfer_responder

__all__ = [
    "CertificateAuthority", "MemoryChannel", "Message", "MsgType", "NodeType", "OrgContext",
    "ProvisionParty", "Session", "SocketChannel", "TamperChannel", "TransferParty",
    "backup_restore", "fetch_ca_cert", "issuance_ca", "issuance_website", "provision_initiator",
    "provision_responder", "run_pair", "transfer_initiator", "transfer_responder",
]
