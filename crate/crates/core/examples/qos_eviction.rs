use ufa::fleet::{EnvId, FailureClass, HostId};
use ufa::placement::{qos_tick, HostLoad, QosConfig, ReplicaLoad};

fn main() {
    let replica = |env, class, consumption| ReplicaLoad { env: EnvId(env), class, consumption, granted: consumption };
    let host = HostLoad {
        host: HostId(0),
        utilization: 0.86,
        replicas: vec![
            replica(0, FailureClass::AlwaysOn, 0.40),
            replica(1, FailureClass::ActiveMigrate, 0.20),
            replica(2, FailureClass::RestoreLater, 0.12),
            replica(3, FailureClass::Terminate, 0.08),
            replica(4, FailureClass::Terminate, 0.06),
        ],
    };
    let decision = qos_tick(&host, &QosConfig::default());
    for a in &decision.actions {
        println!("{}", serde_json::to_string(a).expect("serializable"));
    }
    println!("projected utilization {:.2}", decision.projected);
}
