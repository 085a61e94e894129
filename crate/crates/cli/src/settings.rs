//! Layered settings: defaults, then a `key = value` file, then flags.

use std::path::{Path, PathBuf};

use put_core::sampler::K1;

use crate::error::{CliError, Result};

/// A value that can be read from and written to a config line.
pub trait Setting: Sized {
    fn parse_setting(s: &str) -> Option<Self>;
    fn show(&self) -> String;
}

macro_rules! plain_setting {
    ($($t:ty),*) => {$(
        impl Setting for $t {
            fn parse_setting(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
plain_setting!(usize, u64, f64, bool, String);

impl Setting for PathBuf {
    fn parse_setting(s: &str) -> Option<Self> {
        Some(PathBuf::from(s))
    }
    fn show(&self) -> String {
        self.display().to_string()
    }
}

impl Setting for K1 {
    fn parse_setting(s: &str) -> Option<Self> {
        if s.eq_ignore_ascii_case("all") {
            Some(K1::All)
        } else {
            s.parse().ok().map(K1::Top)
        }
    }
    fn show(&self) -> String {
        match self {
            K1::All => "all".into(),
            K1::Top(n) => n.to_string(),
        }
    }
}

pub fn parse_value<T: Setting>(key: &str, value: &str) -> Result<T> {
    T::parse_setting(value.trim()).ok_or_else(|| CliError::Setting {
        key: key.into(),
        message: format!("cannot parse {value:?}"),
    })
}

/// Reads `key = value` lines; `#` starts a comment. Dashes in keys become underscores.
pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| CliError::ConfigFile {
            path: path.into(),
            line: i + 1,
            message: "expected key = value".into(),
        })?;
        out.push((k.trim().replace('-', "_"), v.trim().to_string()));
    }
    Ok(out)
}

/// Declares a settings struct, its defaults and a matching clap flag set.
macro_rules! settings {
    ($name:ident, $flags:ident { $($(#[doc = $doc:literal])* $field:ident : $ty:ty = $default:expr,)* }) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            $(pub $field: $ty,)*
        }

        impl Default for $name {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        #[derive(clap::Args, Clone, Debug, Default)]
        pub struct $flags {
            /// key = value file applied before the flags.
            #[arg(long)]
            pub config: Option<std::path::PathBuf>,
            $(
                $(#[doc = $doc])*
                #[arg(long)]
                pub $field: Option<String>,
            )*
        }

        impl $name {
            pub fn set(&mut self, key: &str, value: &str) -> $crate::error::Result<()> {
                match key {
                    $(stringify!($field) => self.$field = $crate::settings::parse_value(key, value)?,)*
                    _ => {
                        return Err($crate::error::CliError::Setting {
                            key: key.into(),
                            message: "unknown setting".into(),
                        })
                    }
                }
                Ok(())
            }

            pub fn entries(&self) -> Vec<(&'static str, String)> {
                use $crate::settings::Setting;
                vec![$((stringify!($field), self.$field.show()),)*]
            }

            /// Defaults, overridden by the config file, overridden by flags.
            pub fn resolve(flags: &$flags) -> $crate::error::Result<Self> {
                let mut s = Self::default();
                if let Some(path) = &flags.config {
                    for (k, v) in $crate::settings::read_config_file(path)? {
                        s.set(&k, &v)?;
                    }
                }
                $(
                    if let Some(v) = &flags.$field {
                        s.set(stringify!($field), v)?;
                    }
                )*
                Ok(s)
            }

            /// The effective configuration as config-file lines.
            pub fn render(&self) -> String {
                self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
            }
        }
    };
}
pub(crate) use settings;

/// A path setting that must be non-empty.
pub fn required<'a>(path: &'a Path, key: &'static str) -> Result<&'a Path> {
    if path.as_os_str().is_empty() {
        Err(CliError::Missing(key))
    } else {
        Ok(path)
    }
}

pub fn optional(path: &Path) -> Option<&Path> {
    (!path.as_os_str().is_empty()).then_some(path)
}
