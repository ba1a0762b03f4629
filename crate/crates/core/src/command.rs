//! Operator commands of the PaaS gateway.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::experiment::ExperimentDescription;
use crate::hub::store::TraceFilter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandKind {
    StartExperiment,
    StopExperiment,
    SetValue,
    QueryTrace,
    GetStatus,
    ListResources,
}

impl CommandKind {
    pub const ALL: [CommandKind; 6] = [
        CommandKind::StartExperiment,
        CommandKind::StopExperiment,
        CommandKind::SetValue,
        CommandKind::QueryTrace,
        CommandKind::GetStatus,
        CommandKind::ListResources,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CommandKind::StartExperiment => "start_experiment",
            CommandKind::StopExperiment => "stop_experiment",
            CommandKind::SetValue => "set_value",
            CommandKind::QueryTrace => "query_trace",
            CommandKind::GetStatus => "get_status",
            CommandKind::ListResources => "list_resources",
        }
    }
}

impl fmt::Display for CommandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CommandKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CommandKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| format!("unknown command kind `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Command {
    StartExperiment {
        experiment: Box<ExperimentDescription>,
    },
    StopExperiment {
        #[serde(default)]
        run: Option<String>,
    },
    /// Queued and applied at the next macro-step boundary. `run` may be
    /// omitted in stage entry actions, which always target their own run.
    SetValue {
        #[serde(default)]
        run: Option<String>,
        topic: String,
        value: f64,
        unit: String,
    },
    QueryTrace {
        filter: TraceFilter,
    },
    GetStatus {
        #[serde(default)]
        run: Option<String>,
    },
    ListResources,
}

impl Command {
    pub fn kind(&self) -> CommandKind {
        match self {
            Command::StartExperiment { .. } => CommandKind::StartExperiment,
            Command::StopExperiment { .. } => CommandKind::StopExperiment,
            Command::SetValue { .. } => CommandKind::SetValue,
            Command::QueryTrace { .. } => CommandKind::QueryTrace,
            Command::GetStatus { .. } => CommandKind::GetStatus,
            Command::ListResources => CommandKind::ListResources,
        }
    }

    pub fn set_value(topic: &str, value: f64, unit: &str) -> Self {
        Command::SetValue { run: None, topic: topic.to_string(), value, unit: unit.to_string() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_round_trip_through_strings() {
        for k in CommandKind::ALL {
            assert_eq!(k.as_str().parse::<CommandKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.as_str()));
        }
        assert!("reboot".parse::<CommandKind>().is_err());
    }

    #[test]
    fn set_value_json() {
        let c: Command =
            serde_json::from_str(r#"{"kind":"set_value","topic":"siteB.der.p_set","value":5.0,"unit":"kW"}"#).unwrap();
        assert_eq!(c, Command::set_value("siteB.der.p_set", 5.0, "kW"));
        assert_eq!(c.kind(), CommandKind::SetValue);
        let l: Command = serde_json::from_str(r#"{"kind":"list_resources"}"#).unwrap();
        assert_eq!(l.kind(), CommandKind::ListResources);
    }
}
