//! Per-device execution profiles and the platform they describe.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed};
use serde::{Deserialize, Serialize};

use super::{DeviceId, DeviceType, KernelId};
use crate::time::Millis;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProfileError {
    #[error("malformed profile document: {0}")]
    Malformed(String),
    #[error("device {0} listed twice")]
    DuplicateDevice(DeviceId),
    #[error("device {device}: {msg}")]
    InvalidValue { device: DeviceId, msg: String },
    #[error("no execution time for kernel {kernel} on device {device}")]
    MissingProfileEntry { kernel: KernelId, device: DeviceId },
    #[error("no device of type {0}")]
    NoDeviceOfType(DeviceType),
    #[error("unknown device {0}")]
    UnknownDevice(DeviceId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceProfile {
    pub device_id: DeviceId,
    pub device_type: DeviceType,
    /// Standalone execution time of each kernel on this device.
    pub kernel_times: BTreeMap<KernelId, Millis>,
    /// Fraction of the device a kernel occupies when running; absent means 1.
    pub kernel_share: BTreeMap<KernelId, BigRational>,
    pub copy_channels: u32,
    /// Bytes per millisecond.
    pub bandwidth: BigRational,
    pub transfer_latency: Millis,
}

impl DeviceProfile {
    pub fn new(device_id: DeviceId, device_type: DeviceType) -> Self {
        DeviceProfile {
            device_id,
            device_type,
            kernel_times: BTreeMap::new(),
            kernel_share: BTreeMap::new(),
            copy_channels: 2,
            bandwidth: BigRational::one(),
            transfer_latency: Millis::zero(),
        }
    }

    fn validate(&self) -> Result<(), ProfileError> {
        let bad = |msg: String| ProfileError::InvalidValue { device: self.device_id, msg };
        for (k, t) in &self.kernel_times {
            if !t.is_positive() {
                return Err(bad(format!("kernel {k} time must be positive")));
            }
        }
        for (k, s) in &self.kernel_share {
            if !s.is_positive() || *s > BigRational::one() {
                return Err(bad(format!("kernel {k} share must lie in (0,1]")));
            }
        }
        if self.device_type == DeviceType::Gpu {
            if self.copy_channels == 0 {
                return Err(bad("copy_channels must be at least 1".into()));
            }
            if !self.bandwidth.is_positive() {
                return Err(bad("bandwidth must be positive".into()));
            }
            if self.transfer_latency.is_negative() {
                return Err(bad("transfer_latency must be non-negative".into()));
            }
        }
        Ok(())
    }
}

/// Transfer duration of `bytes` to or from device `d`. Free on CPUs.
pub fn transfer_time(bytes: i64, d: &DeviceProfile) -> Millis {
    match d.device_type {
        DeviceType::Cpu => Millis::zero(),
        DeviceType::Gpu => {
            let payload = BigRational::from_integer(BigInt::from(bytes)) / &d.bandwidth;
            &d.transfer_latency + &Millis::from_rational(payload)
        }
    }
}

/// The set of devices a schedule runs on, indexed by device id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Platform {
    devices: Vec<DeviceProfile>,
}

impl Platform {
    pub fn new(mut devices: Vec<DeviceProfile>) -> Result<Self, ProfileError> {
        devices.sort_by_key(|d| d.device_id);
        for w in devices.windows(2) {
            if w[0].device_id == w[1].device_id {
                return Err(ProfileError::DuplicateDevice(w[0].device_id));
            }
        }
        for d in &devices {
            d.validate()?;
        }
        Ok(Platform { devices })
    }

    pub fn devices(&self) -> &[DeviceProfile] {
        &self.devices
    }

    pub fn device(&self, id: DeviceId) -> Result<&DeviceProfile, ProfileError> {
        self.devices
            .binary_search_by_key(&id, |d| d.device_id)
            .map(|i| &self.devices[i])
            .map_err(|_| ProfileError::UnknownDevice(id))
    }

    pub fn time(&self, kernel: KernelId, device: DeviceId) -> Result<&Millis, ProfileError> {
        self.device(device)?.kernel_times.get(&kernel).ok_or(ProfileError::MissingProfileEntry { kernel, device })
    }

    pub fn share(&self, kernel: KernelId, device: DeviceId) -> BigRational {
        self.device(device).ok().and_then(|d| d.kernel_share.get(&kernel).cloned()).unwrap_or_else(BigRational::one)
    }

    /// Lowest-id device of the given type.
    pub fn first_of_type(&self, ty: DeviceType) -> Result<&DeviceProfile, ProfileError> {
        self.devices.iter().find(|d| d.device_type == ty).ok_or(ProfileError::NoDeviceOfType(ty))
    }
}

// ---- document format ----

#[derive(Serialize, Deserialize)]
struct DocProfile {
    device_id: DeviceId,
    device_type: DeviceType,
    #[serde(default)]
    kernel_times: BTreeMap<KernelId, Value>,
    #[serde(default)]
    kernel_share: BTreeMap<KernelId, Value>,
    #[serde(default)]
    copy_channels: Option<u32>,
    #[serde(default)]
    bandwidth: Option<Value>,
    #[serde(default)]
    transfer_latency: Option<Value>,
}

/// A JSON number, or a string such as `"2/3"` for values a decimal cannot
/// carry exactly.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Value {
    Number(serde_json::Number),
    Text(String),
}

fn exact(v: &Value) -> Result<Millis, ProfileError> {
    let text = match v {
        Value::Number(n) => n.to_string(),
        Value::Text(s) => s.clone(),
    };
    text.parse().map_err(|e: crate::time::ParseMillisError| ProfileError::Malformed(e.to_string()))
}

fn number(m: &BigRational) -> Value {
    if m.is_integer() {
        if let Ok(i) = m.numer().to_string().parse::<i64>() {
            return Value::Number(i.into());
        }
    }
    let v = Millis::from_rational(m.clone());
    if let Some(n) = serde_json::Number::from_f64(v.to_f64()) {
        if n.to_string().parse::<Millis>().is_ok_and(|back| back == v) {
            return Value::Number(n);
        }
    }
    Value::Text(format!("{}/{}", m.numer(), m.denom()))
}

/// Parses a JSON array of device profile records.
pub fn parse_profiles(text: &str) -> Result<Platform, ProfileError> {
    let docs: Vec<DocProfile> = serde_json::from_str(text).map_err(|e| ProfileError::Malformed(e.to_string()))?;
    let mut devices = Vec::with_capacity(docs.len());
    for d in docs {
        let mut p = DeviceProfile::new(d.device_id, d.device_type);
        for (k, t) in &d.kernel_times {
            p.kernel_times.insert(*k, exact(t)?);
        }
        for (k, s) in &d.kernel_share {
            p.kernel_share.insert(*k, exact(s)?.as_rational().clone());
        }
        if let Some(c) = d.copy_channels {
            p.copy_channels = c;
        }
        if let Some(b) = &d.bandwidth {
            p.bandwidth = exact(b)?.as_rational().clone();
        } else if p.device_type == DeviceType::Gpu {
            return Err(ProfileError::InvalidValue {
                device: p.device_id,
                msg: "gpu profile needs a bandwidth".into(),
            });
        }
        if let Some(l) = &d.transfer_latency {
            p.transfer_latency = exact(l)?;
        }
        devices.push(p);
    }
    Platform::new(devices)
}

/// Serializes a platform back to the profile document format. Values with
/// no exact decimal form are written as `"p/q"` strings.
pub fn profiles_to_json(platform: &Platform) -> String {
    let docs: Vec<DocProfile> = platform
        .devices()
        .iter()
        .map(|d| DocProfile {
            device_id: d.device_id,
            device_type: d.device_type,
            kernel_times: d.kernel_times.iter().map(|(k, t)| (*k, number(t.as_rational()))).collect(),
            kernel_share: d.kernel_share.iter().map(|(k, s)| (*k, number(s))).collect(),
            copy_channels: Some(d.copy_channels),
            bandwidth: Some(number(&d.bandwidth)),
            transfer_latency: Some(number(d.transfer_latency.as_rational())),
        })
        .collect();
    serde_json::to_string_pretty(&docs).expect("profile serialization cannot fail")
}
