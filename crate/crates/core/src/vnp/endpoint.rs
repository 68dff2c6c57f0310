use std::sync::{Arc, Mutex};
use std::time::Duration;

use crate::pip::PipService;
use crate::wire::{call, CallError, Envelope, Handler};

/// How the broker reaches one provider.
pub trait PipEndpoint: Send + Sync {
    fn call(&self, method: &str, req: &Envelope) -> Result<Envelope, CallError>;
}

/// A provider reached over TCP.
pub struct RemotePip {
    pub address: String,
    pub timeout: Duration,
}

impl PipEndpoint for RemotePip {
    fn call(&self, method: &str, req: &Envelope) -> Result<Envelope, CallError> {
        let body = call(&self.address, method, req.encode(), self.timeout)?;
        Envelope::decode(&body).map_err(|e| CallError::Io(format!("bad response body: {e}")))
    }
}

/// A provider in the same process, called through its wire handler.
pub struct LocalPip(pub Arc<PipService>);

impl PipEndpoint for LocalPip {
    fn call(&self, method: &str, req: &Envelope) -> Result<Envelope, CallError> {
        if !self.0.serves(method) {
            return Err(CallError::Remote {
                code: "unknown_method".into(),
                message: method.into(),
            });
        }
        let body = self.0.handle(method, &req.encode()).map_err(|f| CallError::Remote {
            code: f.code,
            message: f.message,
        })?;
        Envelope::decode(&body).map_err(|e| CallError::Io(format!("bad response body: {e}")))
    }
}

/// A provider that cannot be reached.
pub struct DownPip;

impl PipEndpoint for DownPip {
    fn call(&self, _: &str, _: &Envelope) -> Result<Envelope, CallError> {
        Err(CallError::ConnectionRefused("down".into()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireRecord {
    pub pip: String,
    pub method: String,
    pub request: Envelope,
    pub ok: bool,
}

/// Every call the broker made, in order.
#[derive(Debug, Clone, Default)]
pub struct WireLog(Arc<Mutex<Vec<WireRecord>>>);

impl WireLog {
    pub fn push(&self, r: WireRecord) {
        self.0.lock().unwrap_or_else(|p| p.into_inner()).push(r);
    }

    pub fn records(&self) -> Vec<WireRecord> {
        self.0.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn clear(&self) {
        self.0.lock().unwrap_or_else(|p| p.into_inner()).clear();
    }

    pub fn calls_of(&self, method: &str) -> Vec<WireRecord> {
        self.records().into_iter().filter(|r| r.method == method).collect()
    }
}
